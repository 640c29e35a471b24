"""CAD retrieval by Euclidean nearest neighbour over 512-d descriptors.

``geometric_descriptor`` pools a 32^3 distance field into 8 statistics per
8^3 block (4^3 blocks), a deterministic stand-in for a learned latent.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DESCRIPTOR_DIM = 512
BLOCKS = 4
CHANNELS = 8
OCCUPANCY_THRESHOLDS = (1.0 / 32, 2.0 / 32, 4.0 / 32)


class EmptyStore(ValueError):
    pass


def geometric_descriptor(df):
    """8 x 4^3 descriptor of a 32^3 unsigned distance field.

    Channels per 8^3 block: mean, min, mean gradient along x, y, z, and the
    fraction of cells with distance below 1, 2 and 4 voxel sizes (normalized
    units). Flattened channel-major to 512 values.
    """
    v = np.asarray(df.data if hasattr(df, "data") else df, dtype=np.float64)
    if v.shape != (32, 32, 32):
        raise ValueError(f"descriptor needs a 32^3 distance field, got {v.shape}")
    b = 32 // BLOCKS
    gx, gy, gz = np.gradient(v)

    def pool(a, op):
        blocks = a.reshape(BLOCKS, b, BLOCKS, b, BLOCKS, b)
        return op(blocks, axis=(1, 3, 5))

    chans = [pool(v, np.mean), pool(v, np.min),
             pool(gx, np.mean), pool(gy, np.mean), pool(gz, np.mean)]
    chans += [pool((v < t).astype(np.float64), np.mean) for t in OCCUPANCY_THRESHOLDS]
    out = np.stack(chans).reshape(-1)
    assert out.size == DESCRIPTOR_DIM
    return out


@dataclass
class DescriptorStore:
    """Descriptors keyed by unique CAD id, with a category per entry."""

    dim: int = DESCRIPTOR_DIM
    ids: list = field(default_factory=list)
    categories: list = field(default_factory=list)
    _rows: list = field(default_factory=list, repr=False)
    _matrix: np.ndarray = field(default=None, repr=False)
    _id_set: set = field(default_factory=set, repr=False)

    def add(self, cad_id, category, descriptor):
        d = np.asarray(descriptor, dtype=np.float64).reshape(-1)
        if d.size != self.dim:
            raise ValueError(f"descriptor has {d.size} values, store expects {self.dim}")
        if not np.all(np.isfinite(d)):
            raise ValueError("descriptor values must be finite")
        cad_id = str(cad_id)
        if cad_id in self._id_set:
            raise ValueError(f"duplicate cad id {cad_id!r}")
        self._id_set.add(cad_id)
        self.ids.append(cad_id)
        self.categories.append(category)
        self._rows.append(d)
        self._matrix = None

    def __len__(self):
        return len(self.ids)

    @property
    def matrix(self):
        if self._matrix is None:
            self._matrix = (np.stack(self._rows) if self._rows
                            else np.zeros((0, self.dim)))
        return self._matrix

    def category_of(self, cad_id):
        return self.categories[self.ids.index(cad_id)]

    def save(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        index = {"dim": self.dim, "matrix": "descriptors.f32",
                 "entries": [{"id": i, "category": c} for i, c in zip(self.ids, self.categories)]}
        (d / "index.json").write_text(json.dumps(index, indent=1))
        self.matrix.astype("<f4").tofile(d / "descriptors.f32")

    @classmethod
    def load(cls, directory):
        d = Path(directory)
        index = json.loads((d / "index.json").read_text())
        dim = int(index["dim"])
        entries = index["entries"]
        mat = np.fromfile(d / index.get("matrix", "descriptors.f32"), dtype="<f4")
        if mat.size != dim * len(entries):
            raise ValueError(f"descriptor file holds {mat.size} values, "
                             f"expected {dim} x {len(entries)}")
        store = cls(dim)
        for e, row in zip(entries, mat.reshape(len(entries), dim).astype(np.float64)):
            store.add(e["id"], e.get("category"), row)
        return store


def nearest(store, query, k=1, category=None, pool=None):
    """``k`` nearest entries by Euclidean distance.

    Ties in distance are broken by lexicographic CAD id. ``category`` and
    ``pool`` (an iterable of allowed ids) restrict the candidates.

    Returns
    -------
    list of (cad_id, distance), ascending.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(store) == 0:
        raise EmptyStore("descriptor store is empty")
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    if q.size != store.dim:
        raise ValueError(f"query has {q.size} values, store expects {store.dim}")
    cand = np.arange(len(store))
    if category is not None:
        cand = cand[np.array([c == category for c in store.categories], dtype=bool)]
    if pool is not None:
        allowed = set(pool)
        cand = cand[np.array([store.ids[i] in allowed for i in cand], dtype=bool)]
    if len(cand) == 0:
        raise EmptyStore("no store entries match the retrieval filter")
    diff = store.matrix[cand] - q
    dist = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    ids = np.array([store.ids[i] for i in cand])
    order = np.lexsort((ids, dist))[:k]
    return [(str(ids[i]), float(dist[i])) for i in order]

"""Layer-wise modality collections from frozen forward passes, and their refinement."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .backbone import Backbone, pool_modality, stack_tokens
from .errors import ContractError, InputError
from .serialize import load_tensor, save_tensor
from .tensor import no_grad


@dataclass
class LayerCollection:
    modality: str
    layer: int
    vectors: np.ndarray  # [N, d]
    source_ids: list[int]

    def __len__(self) -> int:
        return len(self.vectors)


@dataclass
class RefinedCollection:
    modality: str
    layer: int
    prototypes: np.ndarray  # [N', d]
    method: str
    objective: float | None = None
    history: list[float] = field(default_factory=list)
    assignment: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.prototypes)


def build_collections(backbone: Backbone, samples: Sequence, modality: str | None = None,
                      batch_size: int = 128) -> dict[str, list[LayerCollection]]:
    """Pooled per-modality representations at layers ``0..L-1`` of the frozen backbone.

    Only samples where the modality is observed contribute to its collection.
    Returns ``{modality: [layer0, ..., layer L-1]}``; restricted to one
    modality when ``modality`` is given.
    """
    cfg = backbone.cfg
    modalities = cfg.modalities if modality is None else (modality,)
    vecs = {m: [[] for _ in range(cfg.L)] for m in modalities}
    ids = {m: [] for m in modalities}
    with no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            batch = backbone.embed(stack_tokens(chunk, cfg.modalities))
            h = batch.tokens
            for l in range(cfg.L):
                if l > 0:
                    h = backbone.layer_forward(l - 1, h)
                    batch.tokens = h
                for m in modalities:
                    avail = np.array([m not in s.pattern for s in chunk])
                    if avail.any():
                        vecs[m][l].append(pool_modality(batch, m).data[avail])
            for m in modalities:
                ids[m] += [s.id for s in chunk if m not in s.pattern]
    out = {}
    for m in modalities:
        out[m] = [
            LayerCollection(m, l, np.concatenate(vecs[m][l]) if vecs[m][l] else np.zeros((0, cfg.d)), list(ids[m]))
            for l in range(cfg.L)
        ]
    return out


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(len(x))]]
    closest = _sq_dists(x, centers[0][None]).ravel()
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = rng.integers(len(x))
        else:
            idx = rng.choice(len(x), p=closest / total)
        centers.append(x[idx])
        closest = np.minimum(closest, _sq_dists(x, x[idx][None]).ravel())
    return np.array(centers)


def refine_kmeans(coll: LayerCollection, n_proto: int, iters: int = 300, seed: int = 0) -> RefinedCollection:
    """Lloyd's algorithm with k-means++ seeding.

    ``history`` holds the within-cluster sum of squares after each assignment
    step; it never increases.  An emptied cluster is re-seeded at the point
    farthest from its current centroid.
    """
    x = np.asarray(coll.vectors, dtype=np.float64)
    n = len(x)
    if n_proto < 1 or n_proto > n:
        raise InputError(f"n_proto={n_proto} must lie in [1, {n}]")
    if iters < 1:
        raise InputError("iters must be >= 1")
    rng = np.random.default_rng(seed)
    centers = kmeans_pp_init(x, n_proto, rng)
    labels = None
    history = []
    for _ in range(iters):
        dists = _sq_dists(x, centers)
        new_labels = dists.argmin(axis=1)
        history.append(float(dists[np.arange(n), new_labels].sum()))
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        centers = _update(x, labels, centers)
    labels = _sq_dists(x, centers).argmin(axis=1)
    centers = _update(x, labels, centers, reseed=False)
    objective = float(((x - centers[labels]) ** 2).sum())
    return RefinedCollection(coll.modality, coll.layer, centers, "kmeans", objective, history, labels)


def _update(x, labels, centers, reseed: bool = True) -> np.ndarray:
    k = len(centers)
    counts = np.bincount(labels, minlength=k)
    sums = np.zeros_like(centers)
    np.add.at(sums, labels, x)
    new = centers.copy()
    nonempty = counts > 0
    new[nonempty] = sums[nonempty] / counts[nonempty, None]
    if reseed and not nonempty.all():
        far = ((x - new[labels]) ** 2).sum(1)
        for j in np.flatnonzero(~nonempty):
            p = int(far.argmax())
            new[j] = x[p]
            far[p] = -1.0
    return new


def refine_pooling(coll: LayerCollection, window: int) -> RefinedCollection:
    """Average consecutive non-overlapping windows of ``window`` vectors.

    A trailing partial window is averaged into one extra prototype.
    """
    if window < 1:
        raise InputError("window must be >= 1")
    x = np.asarray(coll.vectors, dtype=np.float64)
    protos = [x[i:i + window].mean(axis=0) for i in range(0, len(x), window)]
    return RefinedCollection(coll.modality, coll.layer, np.array(protos).reshape(-1, x.shape[1]), "pooling")


def refine_all(collections: Mapping[str, list[LayerCollection]], method: str = "kmeans", n_proto: int = 64,
               window: int = 4, iters: int = 300, seed: int = 0) -> dict[str, list[RefinedCollection]]:
    out = {}
    for m, layers in collections.items():
        refined = []
        for coll in layers:
            if len(coll) == 0:
                raise ContractError(f"no {m}-available samples to build a collection from")
            if method == "kmeans":
                refined.append(refine_kmeans(coll, min(n_proto, len(coll)), iters, seed + coll.layer))
            elif method == "pooling":
                refined.append(refine_pooling(coll, window))
            else:
                raise InputError(f"unknown refinement method {method!r}")
        out[m] = refined
    return out


# -- cache -----------------------------------------------------------------

def save_collections(directory, raw: Mapping[str, list[LayerCollection]],
                     refined: Mapping[str, list[RefinedCollection]], meta: dict) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = dict(meta)
    manifest["modalities"] = {}
    for m, layers in raw.items():
        for c in layers:
            save_tensor(directory / f"{m}_l{c.layer}_raw.aotn", c.vectors)
        for r in refined[m]:
            save_tensor(directory / f"{m}_l{r.layer}_proto.aotn", r.prototypes)
        manifest["modalities"][m] = {
            "layers": len(layers),
            "sample_ids": layers[0].source_ids,
            "method": refined[m][0].method,
            "objectives": [r.objective for r in refined[m]],
        }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_refined(directory) -> dict[str, list[RefinedCollection]]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    out = {}
    for m, info in manifest["modalities"].items():
        out[m] = [
            RefinedCollection(m, l, load_tensor(directory / f"{m}_l{l}_proto.aotn"), info["method"],
                              info["objectives"][l])
            for l in range(info["layers"])
        ]
    return out

"""Embedding export, PCA projection, and the read-only explorer service.

The export bundle is a directory of verbatim per-attribute embedding tables
(.npy), per-card embeddings, and JSON metadata (tokens plus any planted
ground-truth groupings) behind an index file carrying the schema hash. The
HTTP service is stateless: every endpoint is a pure function of the bundle
and the request, with per-request deterministic sampling seeded from the
request parameters, so identical queries return identical payloads.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .corpus import CardSequence, SchemaLayout, collate
from .model import EmbeddingTable, TransactionModel
from .schema import AttrKind

INDEX_FILE = "index.json"
PROJECTION_METHODS = ("pca",)


@dataclass(frozen=True)
class ProjectionRequest:
    attribute: str
    method: str = "pca"
    dims: int = 2
    color_by: str | None = None
    sample_per_group: int = 50
    n_groups: int = 10
    sample: int | None = None  # ungrouped sample size; overrides grouping
    seed: int | None = None    # None -> derived from the other parameters

    def __post_init__(self):
        if self.dims not in (2, 3):
            raise ValueError("dims must be 2 or 3")
        if self.method not in PROJECTION_METHODS:
            raise ValueError(f"unknown projection method {self.method!r}")

    def effective_seed(self) -> int:
        if self.seed is not None:
            return self.seed
        key = json.dumps([self.attribute, self.method, self.dims, self.color_by,
                          self.sample_per_group, self.n_groups, self.sample])
        return int.from_bytes(hashlib.sha256(key.encode()).digest()[:8], "little")


def project_pca(vectors: np.ndarray, dims: int) -> tuple[np.ndarray, np.ndarray]:
    """Top principal components via eigendecomposition of the covariance.

    Deterministic sign convention: each component's largest-magnitude
    coordinate is positive. Returns (coordinates [n, dims],
    explained-variance ratios [dims]).
    """
    n, d = vectors.shape
    if n <= dims:
        raise ValueError("need more points than output dimensions")
    x = vectors.astype(np.float64)
    x = x - x.mean(axis=0, keepdims=True)
    cov = (x.T @ x) / (n - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    eigvals = np.clip(eigvals[order], 0.0, None)
    comps = eigvecs[:, order[:dims]]
    for j in range(comps.shape[1]):
        k = np.argmax(np.abs(comps[:, j]))
        if comps[k, j] < 0:
            comps[:, j] = -comps[:, j]
    total = eigvals.sum()
    ratios = eigvals[:dims] / total if total > 0 else np.zeros(dims)
    return x @ comps, ratios


# -- export -------------------------------------------------------------------

def export_bundle(model: TransactionModel, train_seqs: list[CardSequence],
                  out_dir: str | Path, merchant_truth: dict | None = None,
                  batch_size: int = 256, cutoff: float | None = None) -> dict:
    """Write embedding tables, card embeddings, and metadata for serving.

    Card embeddings read the hidden state at each card's final pre-cutoff
    step (the last training-partition window per card). ``merchant_truth``
    attaches the generator's planted merchant groupings for coloring;
    ``cutoff`` records the pretrain boundary for downstream consumers.
    """
    out = Path(out_dir)
    (out / "embeddings").mkdir(parents=True, exist_ok=True)
    (out / "metadata").mkdir(exist_ok=True)
    layout = model.layout
    schema = layout.schema

    index: dict = {"format_version": 1, "schema_hash": model.schema_hash,
                   "attributes": {}, "card": None, "cutoff": cutoff}
    for a in schema:
        if a.kind is not AttrKind.CATEGORICAL:
            continue
        table = model.export_embedding_table(a.name)
        table.save(out / "embeddings" / f"{a.name}.npy")
        vocab = schema.vocabulary(a.name)
        meta: dict = {"tokens": {str(i): vocab.token(i) for i in range(vocab.cardinality)},
                      "oov_index": vocab.oov_index, "pad_index": vocab.pad_index,
                      "groups": {}}
        if a.name == "merchant" and merchant_truth is not None:
            groups: dict[str, dict] = {"country": {}, "city": {}, "category": {}}
            for i in range(vocab.cardinality - 2):
                tok = vocab.token(i)
                truth = merchant_truth.get(tok)
                if truth is None:
                    continue
                for key in groups:
                    groups[key][str(i)] = truth[key]
            meta["groups"] = groups
        (out / "metadata" / f"{a.name}.json").write_text(
            json.dumps(meta, sort_keys=True))
        index["attributes"][a.name] = {
            "file": f"embeddings/{a.name}.npy",
            "cardinality": int(table.matrix.shape[0]),
            "dim": int(table.matrix.shape[1]),
            "metadata_keys": sorted(meta["groups"].keys()),
        }

    # One embedding per card: last window of its training history.
    last_window: dict[int, CardSequence] = {}
    for s in train_seqs:
        last_window[s.card_id] = s
    card_ids = sorted(last_window)
    vecs = []
    model.eval()
    with torch.no_grad():
        for lo in range(0, len(card_ids), batch_size):
            chunk = [last_window[c] for c in card_ids[lo:lo + batch_size]]
            vecs.append(model.card_embeddings(collate(chunk, layout)).numpy())
    cards = np.concatenate(vecs) if vecs else np.zeros((0, model.cfg.hidden_dim))
    np.save(out / "embeddings" / "cards.npy", cards.astype("<f4"), allow_pickle=False)
    np.save(out / "embeddings" / "card_ids.npy",
            np.array(card_ids, dtype="<i8"), allow_pickle=False)
    index["card"] = {"file": "embeddings/cards.npy", "ids_file": "embeddings/card_ids.npy",
                     "count": len(card_ids), "dim": int(cards.shape[1])}
    (out / INDEX_FILE).write_text(json.dumps(index, indent=2, sort_keys=True))
    return index


class EmbeddingBundle:
    """Read-only view over an exported bundle directory."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.index = json.loads((self.root / INDEX_FILE).read_text())
        self._tables: dict[str, np.ndarray] = {}
        self._meta: dict[str, dict] = {}

    @property
    def schema_hash(self) -> str:
        return self.index["schema_hash"]

    def attributes(self) -> list[str]:
        return sorted(self.index["attributes"])

    def table(self, attribute: str) -> np.ndarray:
        if attribute not in self.index["attributes"]:
            raise KeyError(attribute)
        if attribute not in self._tables:
            entry = self.index["attributes"][attribute]
            self._tables[attribute] = np.load(self.root / entry["file"],
                                              allow_pickle=False)
        return self._tables[attribute]

    def metadata(self, attribute: str) -> dict:
        if attribute not in self.index["attributes"]:
            raise KeyError(attribute)
        if attribute not in self._meta:
            self._meta[attribute] = json.loads(
                (self.root / "metadata" / f"{attribute}.json").read_text())
        return self._meta[attribute]

    def card_embeddings(self) -> tuple[np.ndarray, np.ndarray]:
        entry = self.index["card"]
        return (np.load(self.root / entry["file"], allow_pickle=False),
                np.load(self.root / entry["ids_file"], allow_pickle=False))

    # -- deterministic sampling ------------------------------------------

    def sample_indices(self, req: ProjectionRequest) -> tuple[np.ndarray, list[str]]:
        """Pick rows for a request: either N ungrouped, or ``sample_per_group``
        from each of the ``n_groups`` most populous metadata groups. Returns
        (indices, group label per index)."""
        meta = self.metadata(req.attribute)
        n_real = self.index["attributes"][req.attribute]["cardinality"] - 2
        rng = np.random.default_rng(req.effective_seed())
        if req.color_by is None or req.sample is not None:
            size = min(req.sample or (req.sample_per_group * req.n_groups), n_real)
            idx = np.sort(rng.choice(n_real, size=size, replace=False))
            return idx, ["all"] * len(idx)
        groups = meta["groups"].get(req.color_by)
        if groups is None:
            raise KeyError(req.color_by)
        by_label: dict[str, list[int]] = {}
        for i_str, label in groups.items():
            by_label.setdefault(label, []).append(int(i_str))
        ranked = sorted(by_label, key=lambda g: (-len(by_label[g]), g))[:req.n_groups]
        picked: list[int] = []
        labels: list[str] = []
        for label in ranked:
            members = np.array(sorted(by_label[label]))
            take = min(req.sample_per_group, len(members))
            chosen = rng.choice(members, size=take, replace=False)
            picked.extend(int(i) for i in np.sort(chosen))
            labels.extend([label] * take)
        return np.array(picked, dtype=np.int64), labels

    def project(self, req: ProjectionRequest) -> dict:
        idx, labels = self.sample_indices(req)
        vectors = self.table(req.attribute)[idx]
        coords, ratios = project_pca(vectors, req.dims)
        meta = self.metadata(req.attribute)
        tokens = meta["tokens"]
        return {
            "attribute": req.attribute,
            "method": req.method,
            "dims": req.dims,
            "color_by": req.color_by,
            "explained_variance": [float(r) for r in ratios],
            "groups": sorted(set(labels)),
            "points": [
                {"index": int(i), "token": tokens[str(int(i))],
                 "coords": [float(c) for c in coords[row]], "group": labels[row]}
                for row, i in enumerate(idx)
            ],
        }


# -- HTTP service ---------------------------------------------------------

def create_app(bundle_dir: str | Path, static_dir: str | Path | None = None):
    """Read-only FastAPI app over a bundle; CORS open for the explorer."""
    from fastapi import FastAPI, HTTPException, Query
    from fastapi.middleware.cors import CORSMiddleware

    bundle = EmbeddingBundle(bundle_dir)
    app = FastAPI(title="embedding explorer service")
    app.add_middleware(CORSMiddleware, allow_origins=["*"], allow_methods=["GET"],
                       allow_headers=["*"])

    def _attr_or_404(attribute: str) -> None:
        if attribute not in bundle.index["attributes"]:
            raise HTTPException(status_code=404,
                                detail={"error": "unknown attribute",
                                        "attribute": attribute})

    @app.get("/attributes")
    def list_attributes():
        return {
            "attributes": [
                {"name": name, **bundle.index["attributes"][name]}
                for name in bundle.attributes()
            ],
            "card": bundle.index["card"],
            "schema_hash": bundle.schema_hash,
        }

    @app.get("/embeddings/{attribute}")
    def embeddings(attribute: str, sample: int = Query(100, ge=1),
                   seed: int | None = None):
        _attr_or_404(attribute)
        req = ProjectionRequest(attribute=attribute, sample=sample, seed=seed)
        idx, _ = bundle.sample_indices(req)
        table = bundle.table(attribute)
        tokens = bundle.metadata(attribute)["tokens"]
        return {
            "attribute": attribute,
            "indices": [int(i) for i in idx],
            "tokens": [tokens[str(int(i))] for i in idx],
            "vectors": [[float(v) for v in table[i]] for i in idx],
        }

    @app.get("/projection/{attribute}")
    def projection(attribute: str, method: str = "pca", dims: int = Query(2),
                   color_by: str | None = None,
                   sample_per_group: int = Query(50, ge=1),
                   n_groups: int = Query(10, ge=1),
                   sample: int | None = None, seed: int | None = None):
        _attr_or_404(attribute)
        try:
            req = ProjectionRequest(attribute=attribute, method=method, dims=dims,
                                    color_by=color_by,
                                    sample_per_group=sample_per_group,
                                    n_groups=n_groups, sample=sample, seed=seed)
            return bundle.project(req)
        except KeyError as e:
            raise HTTPException(status_code=404,
                                detail={"error": "unknown metadata key",
                                        "key": str(e)})
        except ValueError as e:
            raise HTTPException(status_code=422, detail={"error": str(e)})

    @app.get("/metadata/{attribute}")
    def metadata(attribute: str):
        _attr_or_404(attribute)
        meta = bundle.metadata(attribute)
        return {"attribute": attribute, "keys": sorted(meta["groups"].keys()),
                "groups": meta["groups"], "tokens": meta["tokens"]}

    if static_dir is not None:
        from fastapi.staticfiles import StaticFiles
        app.mount("/app", StaticFiles(directory=str(static_dir), html=True),
                  name="explorer")
    return app


def serve(bundle_dir: str | Path, host: str = "127.0.0.1", port: int = 8765,
          static_dir: str | Path | None = None) -> None:
    import uvicorn
    uvicorn.run(create_app(bundle_dir, static_dir), host=host, port=port)

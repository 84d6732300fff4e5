"""Multi-task training: next-item BCE + graph InfoNCE + sequence InfoNCE."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch

from . import agcl, container, seqenc
from .dataio import Dataset, pad_left, sample_negatives
from .evaluation import MetricsReport, evaluate
from .graphbuild import SparseGraph, extract_subgraph
from .numcore import AdamConfig, NonFiniteError, ParamRegistry, adam_step, init_normal

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 256
    lr: float = 1e-3
    d: int = 64
    max_len: int = 50
    gcn_layers: int = 2
    alpha: float = 0.05
    rank: int = 32
    heads: int = 2
    n_layers: int = 2
    lambda1: float = 0.1
    lambda2: float = 0.1
    tau: float = 0.2
    tau_seq: float = 1.0
    max_epochs: int = 1000
    patience: int = 40
    seed: int = 0
    disable_agcl: bool = False
    disable_pge: bool = False
    freeze_perturbation: bool = False
    layer_combine: str = "mean"
    subgraph_source: str = "refined"
    gce_max_items: int = 512
    gce_stop_grad_original: bool = False
    pge_grad_to_factors: bool = True
    ssl_reduction: str = "mean"
    dropout: float = 0.2
    crop_keep: float = 0.6
    mask_ratio: float = 0.3
    reorder_ratio: float = 0.6
    exclude_seen: bool = True
    dtype: str = "float32"
    metric: str = "ndcg@20"

    def __post_init__(self):
        positive = ("batch_size", "d", "max_len", "gcn_layers", "rank", "heads", "n_layers", "tau", "tau_seq")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.lr < 0 or self.alpha < 0 or self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lr, alpha, lambda1 and lambda2 must be non-negative")
        if self.max_epochs < 1 or self.patience < 0:
            raise ValueError("max_epochs must be >= 1 and patience >= 0")
        if self.d % self.heads:
            raise ValueError(f"d={self.d} must be divisible by heads={self.heads}")
        if self.subgraph_source not in ("original", "refined"):
            raise ValueError(f"subgraph_source must be 'original' or 'refined', got {self.subgraph_source!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")
        agcl.GraphEncoderConfig(self.gcn_layers, self.layer_combine, self.tau)

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32

    @property
    def augmentation(self) -> seqenc.AugmentationConfig:
        return seqenc.AugmentationConfig(
            crop_keep=self.crop_keep, mask_ratio=self.mask_ratio, reorder_ratio=self.reorder_ratio
        )

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def _coerce(field_type, raw: str):
    kind = field_type if isinstance(field_type, str) else field_type.__name__
    if kind == "bool":
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw.strip()


def parse_config_text(text: str) -> dict[str, Any]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in types:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        out[key] = _coerce(types[key], value)
    return out


def load_config(path: str | Path | None = None, **overrides) -> TrainConfig:
    values = parse_config_text(Path(path).read_text()) if path else {}
    values.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**values)


@dataclass
class LossReport:
    rec: float
    gce: float
    seq: float
    total: float
    epoch: int = 0
    step: int = 0

    def to_dict(self) -> dict:
        return {"L_rec": self.rec, "L_gce": self.gce, "L_seq": self.seq, "L_total": self.total,
                "epoch": self.epoch, "step": self.step}


@dataclass
class Batch:
    users: np.ndarray
    inputs: np.ndarray
    targets: np.ndarray
    negatives: np.ndarray
    view1: np.ndarray
    view2: np.ndarray
    gce_items: np.ndarray


class APGL4SR:
    """Parameters plus the forward pieces shared by training and evaluation."""

    def __init__(self, cfg: TrainConfig, num_users: int, num_items: int, graph: SparseGraph):
        if graph.n != num_items + 1:
            raise ValueError(f"graph has {graph.n} nodes, expected num_items + 1 = {num_items + 1}")
        self.cfg = cfg
        self.num_users = num_users
        self.num_items = num_items
        self.graph = graph
        self.registry = ParamRegistry(cfg.torch_dtype)
        self._init_params()

    @property
    def mask_id(self) -> int:
        return self.num_items + 1

    def _init_params(self) -> None:
        cfg, reg = self.cfg, self.registry
        gen = torch.Generator().manual_seed(cfg.seed)
        d, dt = cfg.d, cfg.torch_dtype

        def normal(*shape):
            return init_normal(gen, shape, 0.02, dt)

        reg.add("item_emb", normal(self.num_items + 2, d), pinned_rows=[0])
        reg.add("pos_emb", normal(cfg.max_len, d))
        for i in range(cfg.n_layers):
            for name, shape in seqenc.layer_shapes(d).items():
                leaf = name.split(".")[-1]
                if leaf == "g":
                    value = torch.ones(shape, dtype=dt)
                elif leaf.startswith("b"):
                    value = torch.zeros(shape, dtype=dt)
                else:
                    value = normal(*shape)
                reg.add(f"layers.{i}.{name}", value)
        hidden = seqenc.pge_hidden(d)
        reg.add("user_emb", normal(self.num_users + 1, d), pinned_rows=[0])
        reg.add("pge.w1", normal(d, hidden))
        reg.add("pge.b1", torch.zeros(hidden, dtype=dt))
        reg.add("pge.w2", normal(hidden, 1))
        reg.add("pge.b2", torch.zeros(1, dtype=dt))
        reg.add("w_us", normal(self.graph.n, cfg.rank), pinned_rows=[0])
        reg.add("w_v", normal(self.graph.n, cfg.rank), pinned_rows=[0])
        if cfg.freeze_perturbation:
            reg.frozen.update({"w_us", "w_v"})

    # forward pieces -------------------------------------------------------

    @property
    def uses_perturbation(self) -> bool:
        return not self.cfg.disable_agcl and self.cfg.alpha > 0

    def factors(self) -> tuple[torch.Tensor, torch.Tensor] | None:
        if not self.uses_perturbation:
            return None
        w_us, w_v = self.registry["w_us"], self.registry["w_v"]
        if self.cfg.freeze_perturbation:
            w_us, w_v = w_us.detach(), w_v.detach()
        return agcl.propagate_factors(self.graph, w_us, w_v)

    def subgraph(self, seqs: np.ndarray, factors) -> torch.Tensor:
        source = self.cfg.subgraph_source if factors is not None else "original"
        aw_us, aw_v = factors if factors is not None else (None, None)
        return extract_subgraph(
            self.graph, seqs, source=source, aw_us=aw_us, aw_v=aw_v,
            alpha=self.cfg.alpha, dtype=self.cfg.torch_dtype,
        )

    def relative_bias(self, seqs: np.ndarray, users: np.ndarray, factors) -> torch.Tensor | None:
        if self.cfg.disable_pge:
            return None
        if factors is not None and not self.cfg.pge_grad_to_factors:
            factors = tuple(f.detach() for f in factors)
        return seqenc.personalized_pe(users, self.subgraph(seqs, factors), self.registry.params)

    def encode(self, seqs, users, factors=None, gen: torch.Generator | None = None) -> torch.Tensor:
        pe = self.relative_bias(seqs, users, factors)
        dropout = self.cfg.dropout if gen is not None else 0.0
        return seqenc.encode_sequence(
            seqs, self.registry.params, self.cfg.n_layers, self.cfg.heads, pe=pe, dropout=dropout, gen=gen
        )

    def user_representation(self, seqs: np.ndarray, users: np.ndarray) -> torch.Tensor:
        return self.encode(seqs, users, self.factors())[:, -1]

    def graph_views(self, factors) -> tuple[torch.Tensor, torch.Tensor]:
        cfg = self.cfg
        e0 = self.registry["item_emb"][: self.graph.n]
        e_orig = agcl.lightgcn_propagate(self.graph, e0, cfg.gcn_layers, cfg.layer_combine)
        if cfg.gce_stop_grad_original:
            e_orig = e_orig.detach()
        aw_us, aw_v = factors
        e_ref = agcl.perturbed_propagate(
            self.graph, None, None, cfg.alpha, e0, cfg.gcn_layers, cfg.layer_combine, factors=(aw_us, aw_v)
        )
        return e_orig, e_ref

    # persistence ------------------------------------------------------------

    def to_entries(self) -> dict[str, np.ndarray]:
        entries = {
            "kind": container.encode_text("checkpoint"),
            "config": container.encode_json(dataclasses.asdict(self.cfg)),
            "num_users": np.uint64(self.num_users),
            "num_items": np.uint64(self.num_items),
        }
        entries.update(self.registry.state_arrays())
        return entries

    def save(self, path: str | Path) -> None:
        container.save(path, self.to_entries())

    @classmethod
    def load(cls, path: str | Path, graph: SparseGraph) -> "APGL4SR":
        entries = container.load(path)
        if container.decode_text(entries.get("kind", np.zeros(0, np.uint32))) != "checkpoint":
            raise container.ContainerError(f"{path} does not hold a checkpoint")
        cfg = TrainConfig(**container.decode_json(entries["config"]))
        model = cls(cfg, int(entries["num_users"]), int(entries["num_items"]), graph)
        model.registry.load_arrays(entries)
        return model


def rec_loss(hidden: torch.Tensor, targets, negatives, item_emb: torch.Tensor) -> torch.Tensor:
    """Next-item BCE with one sampled negative per step, averaged over non-padding steps."""
    targets = torch.as_tensor(np.asarray(targets), dtype=torch.long)
    negatives = torch.as_tensor(np.asarray(negatives), dtype=torch.long)
    live = targets != 0
    if not bool(live.any()):
        raise ValueError("rec_loss: no non-padding target steps")
    pos = (hidden * item_emb[targets]).sum(-1)
    neg = (hidden * item_emb[negatives]).sum(-1)
    if not (torch.isfinite(pos[live]).all() and torch.isfinite(neg[live]).all()):
        raise NonFiniteError("rec_loss: non-finite logits")
    per_step = -(torch.nn.functional.logsigmoid(pos) + torch.nn.functional.logsigmoid(-neg))
    return per_step[live].sum() / live.sum()


def trainable_users(dataset: Dataset) -> np.ndarray:
    return np.array(
        [u for u in range(1, dataset.num_users + 1) if len(dataset.sequences.train_view(u)) >= 2], dtype=np.int64
    )


def make_batch(dataset: Dataset, users: np.ndarray, cfg: TrainConfig, rng: np.random.Generator) -> Batch:
    n = cfg.max_len
    aug = cfg.augmentation
    inputs, targets, negatives, view1, view2 = [], [], [], [], []
    items: set[int] = set()
    for u in users:
        tv = dataset.sequences.train_view(int(u))[-(n + 1):]
        inp, tgt = tv[:-1], tv[1:]
        inputs.append(pad_left(inp, n))
        targets.append(pad_left(tgt, n))
        negatives.append(pad_left(sample_negatives(rng, tv, len(tgt), dataset.num_items), n))
        a, b = seqenc.augment(tv[-n:], aug, rng, dataset.mask_id, n)
        view1.append(a)
        view2.append(b)
        items.update(int(i) for i in tv)
    gce_items = np.array(sorted(items), dtype=np.int64)
    if len(gce_items) > cfg.gce_max_items:
        gce_items = np.sort(rng.choice(gce_items, size=cfg.gce_max_items, replace=False))
    return Batch(np.asarray(users), np.stack(inputs), np.stack(targets), np.stack(negatives),
                 np.stack(view1), np.stack(view2), gce_items)


def compose_total(rec, gce, seq, lambda1: float, lambda2: float):
    """``L_rec + lambda1 * L_gce + lambda2 * L_seq``; works on floats and tensors alike."""
    return rec + lambda1 * gce + lambda2 * seq


def compute_losses(model: APGL4SR, batch: Batch, gen: torch.Generator | None = None) -> dict[str, torch.Tensor]:
    """All three objectives and their weighted total for one batch."""
    cfg = model.cfg
    bsz = len(batch.users)
    factors = model.factors()
    seqs = np.concatenate([batch.inputs, batch.view1, batch.view2])
    users = np.concatenate([batch.users] * 3)
    hidden = model.encode(seqs, users, factors, gen)
    l_rec = rec_loss(hidden[:bsz], batch.targets, batch.negatives, model.registry["item_emb"])
    l_seq = seqenc.seq_cl_loss(hidden[bsz:2 * bsz, -1], hidden[2 * bsz:, -1], cfg.tau_seq, cfg.ssl_reduction)
    if cfg.disable_agcl:
        l_gce = torch.zeros((), dtype=cfg.torch_dtype)
    else:
        if factors is None:  # alpha == 0: refined view coincides with the original
            zero = torch.zeros(model.graph.n, cfg.rank, dtype=cfg.torch_dtype)
            factors = (zero, zero)
        e_orig, e_ref = model.graph_views(factors)
        l_gce = agcl.gce_loss(e_orig, e_ref, batch.gce_items, cfg.tau, cfg.ssl_reduction)
    total = compose_total(l_rec, l_gce, l_seq, cfg.lambda1, cfg.lambda2)
    return {"rec": l_rec, "gce": l_gce, "seq": l_seq, "total": total}


def train_step(
    model: APGL4SR,
    batch: Batch,
    gen: torch.Generator | None = None,
    epoch: int = 0,
) -> LossReport:
    losses = compute_losses(model, batch, gen)
    values = {k: float(v.detach()) for k, v in losses.items()}
    if not all(math.isfinite(v) for v in values.values()):
        raise NonFiniteError(f"non-finite loss: {values}")
    model.registry.backprop(losses["total"])
    adam_step(model.registry, AdamConfig(lr=model.cfg.lr))
    return LossReport(values["rec"], values["gce"], values["seq"], values["total"], epoch, model.registry.step)


def _stream(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *keys]))


def _torch_gen(seed: int, *keys: int) -> torch.Generator:
    state = np.random.SeedSequence([seed, *keys]).generate_state(1, dtype=np.uint64)[0]
    return torch.Generator().manual_seed(int(state) & 0x7FFF_FFFF_FFFF_FFFF)


@dataclass
class FitResult:
    model: APGL4SR
    best_epoch: int
    best_metric: float
    epochs_run: int
    history: list[dict] = field(default_factory=list)


def run_epoch(model: APGL4SR, dataset: Dataset, users: np.ndarray, epoch: int) -> list[LossReport]:
    cfg = model.cfg
    order = _stream(cfg.seed, 1, epoch).permutation(users)
    reports = []
    for b, start in enumerate(range(0, len(order), cfg.batch_size)):
        chunk = order[start : start + cfg.batch_size]
        batch = make_batch(dataset, chunk, cfg, _stream(cfg.seed, 2, epoch, b))
        gen = _torch_gen(cfg.seed, 3, epoch, b) if cfg.dropout > 0 else None
        reports.append(train_step(model, batch, gen, epoch))
    return reports


def fit(
    dataset: Dataset,
    graph: SparseGraph,
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
) -> FitResult:
    """Train with early stopping on validation NDCG@20; keeps the best parameters.

    When ``out_dir`` is given, writes ``checkpoint.apgl`` (best epoch) and
    ``train_log.jsonl`` (one JSON object per epoch).
    """
    if cfg.max_len != dataset.max_len:
        log.info("training with max_len=%d on a dataset prepared with max_len=%d", cfg.max_len, dataset.max_len)
    model = APGL4SR(cfg, dataset.num_users, dataset.num_items, graph)
    users = trainable_users(dataset)
    if len(users) == 0:
        raise ValueError("no user has a training view of length >= 2")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_file = (out / "train_log.jsonl").open("w")
    best, best_epoch, stale = -math.inf, 0, 0
    best_state = model.registry.snapshot()
    history = []
    epoch = 0
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            reports = run_epoch(model, dataset, users, epoch)
            metrics = evaluate(model, dataset, "valid", exclude_seen=cfg.exclude_seen)
            score = metrics.to_dict()[cfg.metric]
            improved = score > best
            if improved:
                best, best_epoch, stale = score, epoch, 0
                best_state = model.registry.snapshot()
            else:
                stale += 1
            record = {
                "epoch": epoch,
                "step": model.registry.step,
                **{k: float(np.mean([getattr(r, k[2:].lower()) for r in reports]))
                   for k in ("L_rec", "L_gce", "L_seq", "L_total")},
                "valid": {k: v for k, v in metrics.to_dict().items() if k not in ("split", "seed")},
                "improved": improved,
            }
            history.append(record)
            log.info("epoch %d total=%.5f valid %s=%.5f", epoch, record["L_total"], cfg.metric, score)
            if out is not None:
                log_file.write(json.dumps(record, sort_keys=True) + "\n")
                log_file.flush()
            if stale >= cfg.patience:
                break
    finally:
        if out is not None:
            log_file.close()
    model.registry.restore(best_state)
    if out is not None:
        model.save(out / "checkpoint.apgl")
    return FitResult(model, best_epoch, best, epoch, history)


def evaluate_test(result: FitResult, dataset: Dataset) -> MetricsReport:
    return evaluate(result.model, dataset, "test", exclude_seen=result.model.cfg.exclude_seen)

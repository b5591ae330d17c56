"""Run configuration, single training runs, the answer-dimension sweep and the ablation grid."""
from __future__ import annotations

import csv
import dataclasses
import json
import statistics
from dataclasses import dataclass, field
from pathlib import Path

from .data import AnswerVocabulary, EncodedDataset, encode_dataset
from .model import ModelConfig, VqaModel
from .train import EvalReport, TrainResult, TrainState, evaluate, train

TRAIN_KEYS = ("epochs", "batch_size", "lr", "warmup_steps", "shuffle_seed", "val_fraction")


@dataclass
class RunConfig:
    """Model fields plus training fields; serialises to one flat JSON object."""

    model: ModelConfig = field(default_factory=ModelConfig)
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    warmup_steps: int = 0
    shuffle_seed: int = 0
    val_fraction: float = 0.2

    def to_dict(self) -> dict:
        d = self.model.to_dict()
        d.update({k: getattr(self, k) for k in TRAIN_KEYS})
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        train_part = {k: d.pop(k) for k in TRAIN_KEYS if k in d}
        return cls(model=ModelConfig.from_dict(d), **train_part)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def with_overrides(self, **kw) -> "RunConfig":
        d = self.to_dict()
        for k, v in kw.items():
            if v is None:
                continue
            if k not in d:
                raise KeyError(f"unknown config key {k!r}")
            d[k] = v
        return RunConfig.from_dict(d)

    def fitted_to(self, vocab: AnswerVocabulary, grid_size: int) -> "RunConfig":
        """Set the data-dependent model fields (class count, image tokens)."""
        return self.with_overrides(num_answer_classes=len(vocab), num_image_tokens=grid_size * grid_size)


def reference_config() -> RunConfig:
    """Desk-scale reference: G=4, D_f=64, D_a=128, 4 heads, 2 fusion + 2 decoder layers."""
    return RunConfig(model=ModelConfig(feature_dim=64, answer_embed_dim=128, num_heads=4, fusion_layers=2,
                                       decoder_layers=2, dtype="float32"),
                     epochs=30, batch_size=32, lr=1e-3)


def ablation_config() -> RunConfig:
    """Smaller settings for the 6-cell x k-seed ablation grid so the whole grid runs in minutes."""
    base = reference_config()
    return base.with_overrides(feature_dim=32, answer_embed_dim=64, num_heads=2, epochs=15, warmup_steps=300)


def split_dataset(ds: EncodedDataset, val_fraction: float) -> tuple[EncodedDataset, EncodedDataset]:
    n_val = int(round(len(ds) * val_fraction))
    if n_val <= 0 or n_val >= len(ds):
        raise ValueError(f"val_fraction {val_fraction} leaves an empty split of {len(ds)} samples")
    cut = len(ds) - n_val
    return ds.subset(slice(0, cut)), ds.subset(slice(cut, None))


def run_training(cfg: RunConfig, train_set: EncodedDataset, val_set: EncodedDataset | None,
                 progress=None) -> tuple[VqaModel, TrainState, TrainResult]:
    model = VqaModel(cfg.model)
    state = TrainState(lr=cfg.lr, seed=cfg.shuffle_seed)
    result = train(model, train_set, val_set, cfg.epochs, cfg.batch_size, state,
                   warmup_steps=cfg.warmup_steps, progress=progress)
    return model, state, result


def best_report(model: VqaModel, result: TrainResult, val_set: EncodedDataset) -> EvalReport:
    """Validation report of the retained best parameters (final ones if none)."""
    if result.best_params is not None:
        final = {k: v.copy() for k, v in model.state_dict().items()}
        model.load_state_dict(result.best_params)
        report = evaluate(model, val_set)
        model.load_state_dict(final)
        return report
    return evaluate(model, val_set)


# ------------------------------------------------------------------ sweep

SWEEP_HEADER = ("answer_embed_dim", "open_acc", "closed_acc", "overall_acc", "seed")


def sweep_answer_dim(dims, base: RunConfig, train_set: EncodedDataset, val_set: EncodedDataset) -> list[dict]:
    """Train one model per answer-embedding width and report validation accuracy."""
    dims = list(dims)
    if not dims:
        raise ValueError("dims must be non-empty")
    rows = []
    for d in dims:
        cfg = base.with_overrides(answer_embed_dim=int(d))
        model, _, result = run_training(cfg, train_set, val_set)
        rep = best_report(model, result, val_set).row()
        rows.append({"answer_embed_dim": int(d), "open_acc": rep["open_acc"], "closed_acc": rep["closed_acc"],
                     "overall_acc": rep["overall_acc"], "seed": cfg.model.seed})
    return rows


# --------------------------------------------------------------- ablation

# row ids follow the ablation table: 1/2 product fusion, 3/4 sum fusion, 5/6 concat+attention;
# odd rows without the answer decoder, even rows with it
ABLATION_GRID = (
    (1, "mul", "linear"),
    (2, "mul", "decoder"),
    (3, "sum", "linear"),
    (4, "sum", "decoder"),
    (5, "cman", "linear"),
    (6, "cman", "decoder"),
)
ABLATION_HEADER = ("row", "fusion", "head", "seed", "open_acc", "closed_acc", "overall_acc")
MEDIAN_HEADER = ("row", "fusion", "head", "n_seeds", "median_open_acc", "median_closed_acc", "median_overall_acc")


def ablate(base: RunConfig, train_set: EncodedDataset, val_set: EncodedDataset, seeds) -> list[dict]:
    rows = []
    for row_id, fusion, head in ABLATION_GRID:
        for seed in seeds:
            cfg = base.with_overrides(fusion_kind=fusion, head_kind=head, seed=int(seed), shuffle_seed=int(seed))
            model, _, result = run_training(cfg, train_set, val_set)
            rep = best_report(model, result, val_set).row()
            rows.append({"row": row_id, "fusion": fusion, "head": head, "seed": int(seed),
                         "open_acc": rep["open_acc"], "closed_acc": rep["closed_acc"],
                         "overall_acc": rep["overall_acc"]})
    return rows


def _median(vals) -> str:
    vals = [float(v) for v in vals if v != ""]
    return f"{statistics.median(vals):.6f}" if vals else ""


def ablation_medians(rows: list[dict]) -> list[dict]:
    out = []
    for row_id, fusion, head in ABLATION_GRID:
        cell = [r for r in rows if r["row"] == row_id]
        out.append({"row": row_id, "fusion": fusion, "head": head, "n_seeds": len(cell),
                    "median_open_acc": _median(r["open_acc"] for r in cell),
                    "median_closed_acc": _median(r["closed_acc"] for r in cell),
                    "median_overall_acc": _median(r["overall_acc"] for r in cell)})
    return out


def ablation_trend(medians: list[dict]) -> list[tuple[str, bool]]:
    """The six ordering checks on median overall accuracy.

    Decoder vs linear head within each fusion kind (2>=1, 4>=3, 6>=5), and the
    concat+attention+decoder cell against the other decoder cells (6>=2,
    6>=4) and against the best remaining linear cell (6>=max(1, 3)).
    """
    acc = {m["row"]: float(m["median_overall_acc"]) for m in medians}
    return [
        ("mul: decoder >= linear (2 vs 1)", acc[2] >= acc[1]),
        ("sum: decoder >= linear (4 vs 3)", acc[4] >= acc[3]),
        ("cman: decoder >= linear (6 vs 5)", acc[6] >= acc[5]),
        ("cman+decoder >= mul+decoder (6 vs 2)", acc[6] >= acc[2]),
        ("cman+decoder >= sum+decoder (6 vs 4)", acc[6] >= acc[4]),
        ("cman+decoder >= best other linear (6 vs 1,3)", acc[6] >= max(acc[1], acc[3])),
    ]


# -------------------------------------------------------------------- csv

def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(header), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in header})


def encode_for(cfg: RunConfig, samples, vocab) -> EncodedDataset:
    return encode_dataset(samples, vocab, cfg.model.max_question_tokens)


def config_field_names() -> list[str]:
    return [f.name for f in dataclasses.fields(ModelConfig)] + list(TRAIN_KEYS)


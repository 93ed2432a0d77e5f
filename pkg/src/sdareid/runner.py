"""End-to-end continual few-shot benchmark: pretrain, adapt across the
domain stream with SDA / SFT / DT, evaluate, write artifacts."""

from __future__ import annotations

import dataclasses
import json
import logging
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from sdareid.checkpoint import write_tensors
from sdareid.config import BenchmarkConfig, Hyper, config_to_dict
from sdareid.data import (
    DomainDataset,
    dump_dataset,
    generate_domain,
    make_query_gallery,
    pk_batch,
    sample_few_shot,
    split_identities,
)
from sdareid.evaluation import (
    EvalResult,
    anti_forgetting_eval,
    centroid_shift,
    evaluate_retrieval,
    extract_refined_features,
    forgetting_curve,
)
from sdareid.mda import PretrainTrace, id_step, latent_alignment, pretrain_base
from sdareid.model import (
    ModelBundle,
    ModelConfig,
    add_classes,
    clone_bundle,
    init_bundle,
    same_bits,
    save_bundle,
    snapshot,
)
from sdareid.pfa import PrototypeBank, adapt_domain, init_prototypes

log = logging.getLogger(__name__)


class RunFailed(RuntimeError):
    """A benchmark run stopped part-way; ``record`` holds what was finished."""

    def __init__(self, record: "RunRecord", cause: BaseException) -> None:
        super().__init__(f"{record.method} run failed: {type(cause).__name__}: {cause}")
        self.record = record
        self.cause = cause


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for a named purpose derived from the master seed."""
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode()), *extra]))


def _derived_seed(seed: int, name: str, *extra: int) -> int:
    return int(np.random.SeedSequence([seed, zlib.crc32(name.encode()), *extra]).generate_state(1)[0])


@dataclass
class DomainData:
    domain: int
    train: DomainDataset
    test: DomainDataset
    query: DomainDataset
    gallery: DomainDataset


def build_stream(cfg: BenchmarkConfig) -> list[DomainData]:
    """Generate every domain (training pool plus held-out test identities)."""
    out = []
    offset = 0
    for t, spec in enumerate(cfg.stream, start=1):
        full_spec = dataclasses.replace(
            spec,
            id_count=spec.id_count + cfg.test_ids,
            domain=t,
            id_offset=offset,
            seed=_derived_seed(cfg.seed, "data", spec.seed),
        )
        offset += full_spec.id_count
        full = generate_domain(full_spec)
        train, test = split_identities(full, cfg.test_ids, _derived_seed(cfg.seed, "split", t))
        query, gallery = make_query_gallery(test, _derived_seed(cfg.seed, "query", t))
        out.append(DomainData(t, train, test, query, gallery))
    return out


def model_config(cfg: BenchmarkConfig) -> ModelConfig:
    h = cfg.hyper
    return ModelConfig(cfg.stream[0].input_dim, h.hidden_dim, h.feature_dim, h.latent_dim, h.coder_hidden)


@dataclass
class Pretrained:
    stream: list[DomainData]
    bundle: ModelBundle
    trace: PretrainTrace
    alignment_before: float
    alignment_after: float
    seconds: float


def prepare(cfg: BenchmarkConfig) -> Pretrained:
    """Build the domain stream and pretrain on the first domain.

    The result does not depend on ``cfg.method`` or ``cfg.k_ids`` and can be
    shared between runs that differ only in those.
    """
    start = time.perf_counter()
    stream = build_stream(cfg)
    source = stream[0].train
    bundle = init_bundle(model_config(cfg), source.ids, _derived_seed(cfg.seed, "init"))
    before = latent_alignment(bundle, source.x)
    bundle, trace = pretrain_base(source, bundle, cfg.hyper, substream(cfg.seed, "pretrain"))
    after = latent_alignment(bundle, source.x)
    return Pretrained(stream, bundle, trace, before, after, time.perf_counter() - start)


def planned_backbone_steps(few_shot_size: int, hp: Hyper) -> int:
    """Backbone updates made by prototype-guided feature learning on one domain."""
    return hp.feat_epochs * -(-few_shot_size // hp.batch_size)


def sft_adapt(bundle: ModelBundle, few_shot: DomainDataset, hp: Hyper, steps: int, rng: np.random.Generator) -> int:
    """Supervised fine-tuning with identity losses; the classifier grows by the
    few-shot identities."""
    add_classes(bundle, few_shot.ids, seed=int(rng.integers(2**31)))
    p_ids = min(hp.p_ids, len(few_shot.ids))
    for _ in range(steps):
        batch = pk_batch(few_shot, p_ids, hp.instances_per_id, rng)
        id_step(bundle, batch, hp.lr_feat, hp)
    return steps


def _result_dict(r: EvalResult) -> dict[str, Any]:
    return {
        "domain": r.domain,
        "mAP": r.mAP,
        "rank1": r.rank(1),
        "rank5": r.rank(5),
        "rank10": r.rank(10),
        "query_count": r.query_count,
    }


@dataclass
class RunRecord:
    config_hash: str
    method: str
    seed: int
    k_ids: int
    adaptation: list[EvalResult] = field(default_factory=list)
    anti_forgetting: list[EvalResult] = field(default_factory=list)
    anti_forgetting_mean_mAP: float = 0.0
    anti_forgetting_mean_rank1: float = 0.0
    source_history: list[float] = field(default_factory=list)
    forgetting_drop: float = 0.0
    centroid_shift: list[float] = field(default_factory=list)
    backbone_steps: list[int] = field(default_factory=list)
    planned_steps: list[int] = field(default_factory=list)
    bank_sizes: list[int] = field(default_factory=list)
    freeze_checks: list[dict[str, bool]] = field(default_factory=list)
    source_alignment: tuple[float, float] = (0.0, 0.0)
    wall_clock: dict[str, float] = field(default_factory=dict)
    checkpoints: dict[str, ModelBundle] = field(default_factory=dict, repr=False)
    bank: PrototypeBank | None = field(default=None, repr=False)
    failure: str | None = None

    @property
    def mean_adaptation_mAP(self) -> float:
        return float(np.mean([r.mAP for r in self.adaptation])) if self.adaptation else 0.0

    def to_dict(self) -> dict[str, Any]:
        """Deterministic content; wall-clock timings are kept out."""
        return {
            "config_hash": self.config_hash,
            "method": self.method,
            "seed": self.seed,
            "k_ids": self.k_ids,
            "adaptation": [_result_dict(r) for r in self.adaptation],
            "anti_forgetting": [_result_dict(r) for r in self.anti_forgetting],
            "anti_forgetting_mean_mAP": self.anti_forgetting_mean_mAP,
            "anti_forgetting_mean_rank1": self.anti_forgetting_mean_rank1,
            "source_history": self.source_history,
            "forgetting_drop": self.forgetting_drop,
            "centroid_shift": self.centroid_shift,
            "backbone_steps": self.backbone_steps,
            "planned_steps": self.planned_steps,
            "bank_sizes": self.bank_sizes,
            "freeze_checks": self.freeze_checks,
            "source_alignment": {"before": self.source_alignment[0], "after": self.source_alignment[1]},
            "failure": self.failure,
        }


def run_benchmark(cfg: BenchmarkConfig, pretrained: Pretrained | None = None, threads: int = 1) -> RunRecord:
    """Run one method over the whole domain stream.

    SDA: prototype bank from the source domain, then per new domain
    ``adapt_domain``.  SFT: identity-loss fine-tuning with as many backbone
    steps as SDA's feature stage would take.  DT: no adaptation.
    """
    hp = cfg.hyper
    pre = prepare(cfg) if pretrained is None else pretrained
    stream = pre.stream
    source = stream[0]
    bundle = clone_bundle(pre.bundle)
    record = RunRecord(cfg.digest(), cfg.method, cfg.seed, cfg.k_ids)
    record.wall_clock["pretrain"] = pre.seconds
    record.source_alignment = (pre.alignment_before, pre.alignment_after)
    record.checkpoints["pretrained"] = clone_bundle(bundle)

    def source_map() -> float:
        return evaluate_retrieval(bundle, source.query, source.gallery, hp.normalize_features, threads).mAP

    record.source_history.append(source_map())
    bank = init_prototypes(bundle, source.train) if cfg.method == "sda" else None
    if bank is not None:
        record.bank_sizes.append(bank.n_past)

    try:
        for dom in stream[1:]:
            t0 = time.perf_counter()
            few = sample_few_shot(dom.train, cfg.k_ids, _derived_seed(cfg.seed, "few-shot", dom.domain))
            rng = substream(cfg.seed, "adapt", dom.domain)
            planned = planned_backbone_steps(len(few), hp)
            before = clone_bundle(bundle)
            if cfg.method == "sda":
                bundle, bank, info = adapt_domain(bundle, bank, few, hp, rng)
                record.backbone_steps.append(info.backbone_steps)
                record.freeze_checks.append(info.freeze_checks)
                record.bank_sizes.append(bank.n_past)
            elif cfg.method == "sft":
                record.backbone_steps.append(sft_adapt(bundle, few, hp, planned, rng))
            else:
                if not same_bits(snapshot(before), snapshot(bundle)):
                    raise AssertionError("direct transfer changed the model")
                record.backbone_steps.append(0)
            record.planned_steps.append(planned)
            record.adaptation.append(
                evaluate_retrieval(bundle, dom.query, dom.gallery, hp.normalize_features, threads)
            )
            record.source_history.append(source_map())
            record.centroid_shift.append(centroid_shift(before, bundle, source.test))
            record.checkpoints[f"after_domain{dom.domain}"] = clone_bundle(bundle)
            record.wall_clock[f"adapt_domain{dom.domain}"] = time.perf_counter() - t0
            log.info(
                "%s domain %d: adaptation mAP %.4f, source mAP %.4f",
                cfg.method,
                dom.domain,
                record.adaptation[-1].mAP,
                record.source_history[-1],
            )

        t0 = time.perf_counter()
        final = anti_forgetting_eval(bundle, [(d.query, d.gallery) for d in stream], hp.normalize_features, threads)
        record.anti_forgetting = final.results
        record.anti_forgetting_mean_mAP = final.mean_mAP
        record.anti_forgetting_mean_rank1 = final.mean_rank1
        record.forgetting_drop = forgetting_curve(record.source_history).drop
        record.bank = bank
    except Exception as exc:
        record.failure = f"{type(exc).__name__}: {exc}"
        record.bank = bank
        raise RunFailed(record, exc) from exc
    record.wall_clock["final_eval"] = time.perf_counter() - t0
    return record


# -- artifacts ---------------------------------------------------------------

RESULT_COLUMNS = ("checkpoint", "protocol", "domain", "mAP", "rank1", "rank5", "rank10", "query_count")


def results_rows(record: RunRecord) -> list[dict[str, Any]]:
    rows = []
    steps = [f"after_domain{r.domain}" for r in record.adaptation]
    rows.append({"checkpoint": "pretrained", "protocol": "source", "domain": 1, "mAP": record.source_history[0]})
    for ckpt, res, src in zip(steps, record.adaptation, record.source_history[1:]):
        rows.append({"checkpoint": ckpt, "protocol": "adaptation", **_result_dict(res)})
        rows.append({"checkpoint": ckpt, "protocol": "source", "domain": 1, "mAP": src})
    for res in record.anti_forgetting:
        rows.append({"checkpoint": "final", "protocol": "anti_forgetting", **_result_dict(res)})
    return rows


def write_results_table(rows: list[dict[str, Any]], path: Path) -> None:
    lines = ["\t".join(RESULT_COLUMNS)]
    for row in rows:
        cells = []
        for col in RESULT_COLUMNS:
            value = row.get(col, "")
            cells.append(repr(value) if isinstance(value, float) else str(value))
        lines.append("\t".join(cells))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_bank(bank: PrototypeBank, directory: Path) -> None:
    write_tensors(directory / "bank", {"past": bank.past})
    tags = "".join(f"{d}\t{pid}\n" for d, pid in bank.past_tags)
    (directory / "bank_tags.txt").write_text("domain\tidentity\n" + tags, encoding="utf-8")


def dump_features(bundle: ModelBundle, stream: list[DomainData], path: Path, normalize: bool) -> None:
    """Refined test-set features as ``domain, identity, camera, values...`` rows."""
    lines = []
    for dom in stream:
        feats = extract_refined_features(bundle, dom.test.x, normalize)
        for i in range(len(dom.test)):
            vals = "\t".join(repr(float(v)) for v in feats[i])
            lines.append(f"{dom.domain}\t{dom.test.identity[i]}\t{dom.test.camera[i]}\t{vals}")
    header = "\t".join(["domain", "identity", "camera"] + [f"f{i}" for i in range(bundle.feature_dim)])
    path.write_text(header + "\n" + "\n".join(lines) + "\n", encoding="utf-8")


def write_run(
    record: RunRecord,
    cfg: BenchmarkConfig,
    out_dir: str | Path,
    stream: list[DomainData] | None = None,
    features: bool = False,
    figures: bool = True,
) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(config_to_dict(cfg), indent=1, sort_keys=True) + "\n")
    (out / "run_record.json").write_text(json.dumps(record.to_dict(), indent=1, sort_keys=True) + "\n")
    (out / "timings.json").write_text(json.dumps(record.wall_clock, indent=1, sort_keys=True) + "\n")
    write_results_table(results_rows(record), out / "results.tsv")
    if record.failure is not None:
        (out / "FAILED").write_text(record.failure + "\n", encoding="utf-8")
    for name, bundle in record.checkpoints.items():
        save_bundle(bundle, out / "checkpoints" / name)
    if record.bank is not None:
        write_bank(record.bank, out / "checkpoints")
    if stream is not None:
        data_dir = out / "data"
        data_dir.mkdir(exist_ok=True)
        for dom in stream:
            dump_dataset(dom.query, data_dir / f"domain{dom.domain}_query.tsv")
            dump_dataset(dom.gallery, data_dir / f"domain{dom.domain}_gallery.tsv")
        if features:
            final = list(record.checkpoints.values())[-1]
            dump_features(final, stream, out / "features.tsv", cfg.hyper.normalize_features)
    if figures:
        from sdareid.report import render_run_figures

        render_run_figures(record, out / "figures")
    return out

"""Pipeline orchestration: composable subcommands over one JSON config.

Every stage writes versioned artifacts into the output directory plus a
manifest entry recording the config digest and the SHA-256 of each
input and output file. Re-running a stage whose digests all still match
is a no-op unless --force. A lock file serializes writers per output
directory. Exit codes: 1 usage/config error, 2 data validation error,
3 runtime failure.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import cohort as co
from . import metrics as me
from . import model as mo
from . import screen as sc
from . import synth as sy
from .errors import (
    ConfigError,
    ConfigInvalid,
    DataError,
    DigestMismatch,
    EcgScreenError,
    MissingArtifact,
)
from .icd import LabelKind, build_vocabulary, read_vocabulary_csv, write_vocabulary_csv
from .signals import EcgTrace, fit_normalization, read_container, write_container

_KINDS = ("code", "category")

DEFAULTS: dict = {
    "preset": None,
    "seed": 0,
    "kinds": ["code"],
    "min_support": 1000,
    "paths": {"ecgb": None, "episodes": None, "out": None},
    "split": {"external_frac": 0.40, "val_frac": 0.20},
    "model": {
        "stem": [64, 17],
        "blocks": [[64, 17, 4], [128, 17, 4], [196, 17, 4], [256, 17, 4]],
        "dropout_rate": 0.2,
        "embed_dim": 64,
    },
    "train": {
        "lr": 0.001,
        "batch_size": 512,
        "max_epochs": 70,
        "patience": 7,
        "eval_every": 1,
    },
    "rule": {"auroc_tiers": [0.80, 0.90], "min_auprc": 0.05, "precision_lift": 20.0},
    "synth": None,
}

# The defaults above are the paper-scale preset; desk-scale shrinks the
# model and bundles a five-disease synthetic cohort (three with real
# waveform effects, two null) sized to run on one desktop core.
PRESETS: dict[str, dict] = {
    "paper-scale": {},
    "desk-scale": {
        "min_support": 50,
        "model": {
            "stem": [16, 17],
            "blocks": [[16, 9, 4], [32, 9, 4], [48, 9, 4], [64, 9, 4]],
            "dropout_rate": 0.2,
            "embed_dim": 32,
        },
        "train": {
            "lr": 0.001,
            "batch_size": 128,
            "max_epochs": 10,
            "patience": 3,
            "eval_every": 1,
        },
        "synth": {
            "n_patients": 2000,
            "episodes_per_patient": [1, 2],
            "ecgs_per_episode": [1, 2],
            "age_years": [18.0, 90.0],
            "male_fraction": 0.5,
            "heart_rate_bpm": [55.0, 85.0],
            "noise_std_mv": 0.05,
            "rate_hz": 100.0,
            "duration_s": 10.0,
            "param_jitter": 0.05,
            "diseases": [
                {
                    "code": "I481",
                    "prevalence": 0.22,
                    "effect": {"hr_mult": 1.45},
                    "effect_strength": 1.0,
                },
                {
                    "code": "I214",
                    "prevalence": 0.18,
                    "effect": {"t_shift": 0.10, "st_offset_mv": 0.18},
                    "effect_strength": 1.0,
                },
                {
                    "code": "I109",
                    "prevalence": 0.25,
                    "effect": {"amp_scale": 1.5},
                    "effect_strength": 1.0,
                    "age_slope": 0.04,
                },
                {"code": "N179", "prevalence": 0.20, "effect_strength": 0.0},
                {"code": "J189", "prevalence": 0.15, "effect_strength": 0.0},
            ],
        },
    },
}


def worker_count() -> int:
    """Worker cap from ECGSCREEN_THREADS; defaults to 1."""
    raw = os.environ.get("ECGSCREEN_THREADS")
    if raw is None:
        return 1
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"ECGSCREEN_THREADS must be an integer, got {raw!r}")
    if value < 1:
        raise ConfigError(f"ECGSCREEN_THREADS must be >= 1, got {value}")
    return value


# --- config resolution ----------------------------------------------------

def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def resolve_config(raw: dict, out: Optional[str] = None, kind: Optional[str] = None,
                   seed: Optional[int] = None) -> dict:
    """Merge defaults <- preset <- file <- CLI overrides and validate shape."""
    preset_name = raw.get("preset")
    if preset_name is not None and preset_name not in PRESETS:
        raise ConfigError(
            f"unknown preset {preset_name!r}; choose from {sorted(PRESETS)}"
        )
    cfg = DEFAULTS
    if preset_name:
        cfg = _deep_merge(cfg, PRESETS[preset_name])
    cfg = _deep_merge(cfg, raw)
    if out is not None:
        cfg["paths"]["out"] = out
    if kind is not None:
        cfg["kinds"] = list(_KINDS) if kind == "both" else [kind]
    if seed is not None:
        cfg["seed"] = int(seed)

    if not cfg["paths"]["out"]:
        raise ConfigError("paths.out is required (config file or --out)")
    for k in cfg["kinds"]:
        if k not in _KINDS:
            raise ConfigError(f"kinds entries must be one of {_KINDS}, got {k!r}")
    if not cfg["kinds"]:
        raise ConfigError("kinds must not be empty")
    if cfg["min_support"] < 1:
        raise ConfigError(f"min_support must be >= 1, got {cfg['min_support']}")
    for name in ("external_frac", "val_frac"):
        value = cfg["split"][name]
        if not 0.0 < value < 1.0:
            raise ConfigError(f"split.{name} must be in (0,1), got {value}")
    # fail fast on malformed sections
    sc.SelectionRule.from_json(cfg["rule"])
    train_config(cfg)
    if cfg["synth"] is not None:
        synth_config(cfg)
    return cfg


def config_digest(cfg: dict) -> str:
    """SHA-256 over the resolved config minus file-system locations."""
    semantic = copy.deepcopy(cfg)
    semantic.pop("paths", None)
    blob = json.dumps(semantic, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def train_config(cfg: dict) -> mo.TrainConfig:
    t = cfg["train"]
    return mo.TrainConfig(
        lr=float(t["lr"]),
        batch_size=int(t["batch_size"]),
        max_epochs=int(t["max_epochs"]),
        patience=int(t["patience"]),
        eval_every=int(t["eval_every"]),
        seed=int(t.get("seed", cfg["seed"])),
    )


def synth_config(cfg: dict) -> sy.SynthConfig:
    if cfg["synth"] is None:
        raise ConfigError("config has no synth section")
    section = dict(cfg["synth"])
    section.setdefault("seed", cfg["seed"])
    return sy.SynthConfig.from_json(section)


def model_config(cfg: dict, input_len: int, n_labels: int) -> mo.ModelConfig:
    m = cfg["model"]
    return mo.ModelConfig(
        input_len=input_len,
        n_labels=n_labels,
        stem=tuple(m["stem"]),
        blocks=tuple(mo.BlockSpec(*spec) for spec in m["blocks"]),
        dropout_rate=float(m["dropout_rate"]),
        embed_dim=int(m["embed_dim"]),
    )


# --- artifacts, manifest, locking ----------------------------------------

_ARTIFACTS = {
    "ecgb": "data/ecgs.ecgb",
    "episodes": "data/episodes.csv",
    "ecg_meta": "data/ecg_meta.csv",
    "links": "work/links.csv",
    "vocab": "work/vocab_{kind}.csv",
    "split": "work/split.json",
    "model1": "models/stage1_{kind}.ecgn",
    "model2": "models/stage2_{kind}.ecgn",
    "metrics_internal": "work/metrics_internal_{kind}.csv",
    "metrics_external": "work/metrics_external_{kind}.csv",
    "preds_internal": "work/preds_internal_{kind}.npy",
    "preds_external": "work/preds_external_{kind}.npy",
    "audit_internal": "work/eval_rows_internal_{kind}.csv",
    "audit_external": "work/eval_rows_external_{kind}.csv",
    "selected": "work/selected_{kind}.json",
    "replicated": "work/replicated_{kind}.json",
    "report_json": "report.json",
    "report_csv": "report.csv",
}


@dataclass
class RunContext:
    cfg: dict
    digest: str
    out: Path
    force: bool = False
    cache: dict = field(default_factory=dict)

    def path(self, name: str, kind: Optional[str] = None) -> Path:
        template = _ARTIFACTS[name]
        if "{kind}" in template and kind is None:
            raise ValueError(f"artifact {name} needs a kind")
        return self.out / template.format(kind=kind)

    def data_path(self, name: str) -> Path:
        """ecgb/episodes come from the config when pointing at external data."""
        configured = self.cfg["paths"].get(name)
        return Path(configured) if configured else self.path(name)


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _load_manifest(out: Path) -> dict:
    path = out / "manifest.json"
    if not path.exists():
        return {"version": 1, "stages": {}}
    with open(path) as f:
        return json.load(f)


def _save_manifest(out: Path, manifest: dict) -> None:
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")


def run_stage(ctx: RunContext, name: str, inputs: Sequence[Path],
              outputs: Sequence[Path], fn: Callable[[], Optional[dict]]) -> None:
    """Execute one stage with digest-based caching and manifest recording."""
    for path in inputs:
        if not path.exists():
            raise MissingArtifact(f"stage {name}: missing input {path}")
    manifest = _load_manifest(ctx.out)
    record = manifest["stages"].get(name)
    if record is not None and not ctx.force and record["config_digest"] == ctx.digest:
        fresh = all(
            Path(p).exists() and _sha256_file(Path(p)) == sha
            for section in ("inputs", "outputs")
            for p, sha in record[section].items()
        )
        if fresh:
            print(f"[{name}] up to date, skipping")
            return
    print(f"[{name}] running")
    stats = fn() or {}
    manifest = _load_manifest(ctx.out)
    manifest["stages"][name] = {
        "config_digest": ctx.digest,
        "inputs": {str(p): _sha256_file(Path(p)) for p in inputs},
        "outputs": {str(p): _sha256_file(Path(p)) for p in outputs},
        "stats": stats,
    }
    _save_manifest(ctx.out, manifest)


class OutputLock:
    """Single-writer lock per output directory (exclusive-create file)."""

    def __init__(self, out: Path):
        self.path = out / ".lock"
        self.fd = None

    def __enter__(self):
        try:
            self.fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise EcgScreenError(
                f"output dir is locked by another run ({self.path}); "
                "remove the lock file if that run is dead"
            )
        os.write(self.fd, str(os.getpid()).encode())
        return self

    def __exit__(self, *exc):
        if self.fd is not None:
            os.close(self.fd)
            os.unlink(self.path)


# --- shared data loading --------------------------------------------------

def _traces(ctx: RunContext) -> list[EcgTrace]:
    path = ctx.data_path("ecgb")
    key = ("traces", str(path))
    if key not in ctx.cache:
        if not path.exists():
            raise MissingArtifact(f"ECG container not found: {path}")
        ctx.cache[key] = read_container(path)
    return ctx.cache[key]


def _episodes(ctx: RunContext) -> list[co.Episode]:
    path = ctx.data_path("episodes")
    key = ("episodes", str(path))
    if key not in ctx.cache:
        if not path.exists():
            raise MissingArtifact(f"episodes CSV not found: {path}")
        ctx.cache[key] = co.read_episodes_csv(path)
    return ctx.cache[key]


def _eligible(ctx: RunContext) -> tuple[list[co.EcgMeta], dict[int, EcgTrace]]:
    traces = _traces(ctx)
    metas = co.apply_exclusions([t.meta for t in traces])
    by_id = {t.meta.ecg_id: t for t in traces}
    return metas, {m.ecg_id: by_id[m.ecg_id] for m in metas}


def _links(ctx: RunContext) -> list[tuple[int, int]]:
    return co.read_links_csv(ctx.path("links"))


def _split(ctx: RunContext) -> co.CohortSplit:
    return co.read_split_json(ctx.path("split"))


def _patient_of(metas: Sequence[co.EcgMeta]) -> dict[int, int]:
    return {m.ecg_id: m.patient_id for m in metas}


def _train_rows(links, patient_of, patients: frozenset[int]) -> list[int]:
    """All linked eligible ECGs belonging to the given patients, sorted."""
    return sorted({e for e, _ in links if patient_of[e] in patients})


def _eval_rows(links, metas, episodes, patients: frozenset[int]):
    """First-ECG-per-episode rows for episodes of the given patients.

    Returns (row_ecg_ids, provenance) where provenance lists one
    (episode_id, ecg_id, patient_id) triple per retained episode.
    """
    episode_patient = {ep.episode_id: ep.patient_id for ep in episodes}
    first = co.first_ecg_per_episode(links, metas)
    provenance = [
        (episode_id, ecg_id, episode_patient[episode_id])
        for episode_id, ecg_id in first
        if episode_patient[episode_id] in patients
    ]
    rows = sorted({ecg_id for _, ecg_id, _ in provenance})
    return rows, provenance


def _write_audit(path: Path, stage: int, set_name: str, provenance,
                 config_digest: str) -> None:
    import csv as _csv

    with open(path, "w", newline="") as f:
        f.write(f"# config_digest={config_digest}\n")
        writer = _csv.writer(f)
        writer.writerow(["stage", "eval_set", "episode_id", "ecg_id", "patient_id"])
        for episode_id, ecg_id, patient_id in provenance:
            writer.writerow([stage, set_name, episode_id, ecg_id, patient_id])


def _assemble(ctx, rows, stats, vocab) -> mo.TrainData:
    _, traces_by_id = _eligible(ctx)
    matrix = co.build_label_matrix(rows, _links(ctx), _episodes(ctx), vocab)
    return mo.assemble_inputs(rows, traces_by_id, stats, matrix.bits)


# --- stages ---------------------------------------------------------------

def stage_synth(ctx: RunContext) -> dict:
    config = synth_config(ctx.cfg)
    generated = sy.synth_cohort(config)
    write_container(generated.traces, ctx.path("ecgb"))
    co.write_episodes_csv(generated.episodes, ctx.path("episodes"), ctx.digest)
    co.write_ecg_meta_csv(list(generated.ecgs), ctx.path("ecg_meta"), ctx.digest)
    ctx.cache[("traces", str(ctx.data_path("ecgb")))] = list(generated.traces)
    ctx.cache[("episodes", str(ctx.data_path("episodes")))] = list(generated.episodes)
    return {
        "n_patients": config.n_patients,
        "n_ecgs": len(generated.traces),
        "n_episodes": len(generated.episodes),
    }


def stage_link(ctx: RunContext) -> dict:
    metas, _ = _eligible(ctx)
    episodes = _episodes(ctx)
    links = co.link_ecgs(metas, episodes)
    co.write_links_csv(links, ctx.path("links"), ctx.digest)
    return {
        "n_ecgs_total": len(_traces(ctx)),
        "n_eligible": len(metas),
        "n_links": len(links),
        "n_unlinked": co.count_unlinked(metas, links),
    }


def stage_labels(ctx: RunContext, kind: str) -> dict:
    vocab = build_vocabulary(
        _episodes(ctx), _links(ctx), LabelKind(kind), ctx.cfg["min_support"]
    )
    write_vocabulary_csv(vocab, ctx.path("vocab", kind), ctx.digest)
    return {"kind": kind, "n_labels": len(vocab)}


def stage_split(ctx: RunContext) -> dict:
    metas, _ = _eligible(ctx)
    patient_of = _patient_of(metas)
    linked_patients = sorted({patient_of[e] for e, _ in _links(ctx)})
    split = co.split_patients(
        linked_patients,
        ctx.cfg["split"]["external_frac"],
        ctx.cfg["split"]["val_frac"],
        ctx.cfg["seed"],
    )
    co.write_split_json(split, ctx.path("split"), ctx.digest)
    return {
        "n_patients": len(linked_patients),
        "internal_train": len(split.internal_train),
        "internal_val": len(split.internal_val),
        "external": len(split.external),
    }


def _vocab(ctx: RunContext, kind: str):
    return read_vocabulary_csv(ctx.path("vocab", kind), ctx.cfg["min_support"])


def stage_train(ctx: RunContext, kind: str, stage: int) -> dict:
    metas, traces_by_id = _eligible(ctx)
    links = _links(ctx)
    split = _split(ctx)
    episodes = _episodes(ctx)
    vocab = _vocab(ctx, kind)
    patient_of = _patient_of(metas)
    tcfg = train_config(ctx.cfg)

    if stage == 1:
        train_patients = split.internal_train
        val_rows, _ = _eval_rows(links, metas, episodes, split.internal_val)
    else:
        _, _, meta1, _ = mo.load_checkpoint(ctx.path("model1", kind))
        best_epoch = int(meta1["best_epoch"])
        tcfg = replace(tcfg, max_epochs=best_epoch)
        train_patients = split.internal
        val_rows = None

    rows = _train_rows(links, patient_of, train_patients)
    if not rows:
        raise DataError(f"stage {stage}: no training rows for kind {kind}")
    stats = fit_normalization([traces_by_id[e] for e in rows])
    data = _assemble(ctx, rows, stats, vocab)
    val_data = _assemble(ctx, val_rows, stats, vocab) if val_rows else None

    net = mo.EcgResNet(model_config(ctx.cfg, data.signal.shape[2], len(vocab)),
                       seed=tcfg.seed)
    result = mo.train(net, data, val_data, tcfg)
    metadata = {
        "stage": stage,
        "kind": kind,
        "config_digest": ctx.digest,
        "best_epoch": result.best_epoch,
        "best_val_loss": result.best_val_loss,
        "history": result.history,
        "n_train_rows": len(rows),
        "n_val_rows": len(val_rows) if val_rows else 0,
        "train_seed": tcfg.seed,
    }
    mo.save_checkpoint(net, ctx.path(f"model{stage}", kind), stats=stats,
                       metadata=metadata)
    return {
        "kind": kind,
        "best_epoch": result.best_epoch,
        "final_train_loss": result.history[-1]["train_loss"],
        "n_train_rows": len(rows),
    }


def stage_eval(ctx: RunContext, kind: str, stage: int) -> dict:
    metas, _ = _eligible(ctx)
    links = _links(ctx)
    split = _split(ctx)
    episodes = _episodes(ctx)
    vocab = _vocab(ctx, kind)
    set_name = "internal_val" if stage == 1 else "external"
    patients = split.internal_val if stage == 1 else split.external
    suffix = "internal" if stage == 1 else "external"

    net, stats, metadata, _ = mo.load_checkpoint(ctx.path(f"model{stage}", kind))
    if metadata.get("config_digest") not in (None, ctx.digest):
        raise DigestMismatch(
            f"checkpoint {ctx.path(f'model{stage}', kind)} was trained under a "
            "different config"
        )
    rows, provenance = _eval_rows(links, metas, episodes, patients)
    if not rows:
        raise DataError(f"no evaluation rows in {set_name}")
    data = _assemble(ctx, rows, stats, vocab)
    probs = mo.predict(net, data, batch_size=train_config(ctx.cfg).batch_size)
    results = me.evaluate_labels(probs, data.labels, vocab, threads=worker_count())
    me.write_metrics_csv(results, ctx.path(f"metrics_{suffix}", kind), ctx.digest)
    np.save(ctx.path(f"preds_{suffix}", kind), probs)
    _write_audit(ctx.path(f"audit_{suffix}", kind), stage, set_name, provenance,
                 ctx.digest)
    return {"kind": kind, "set": set_name, "n_rows": len(rows)}


def stage_select(ctx: RunContext, kind: str) -> dict:
    rule = sc.SelectionRule.from_json(ctx.cfg["rule"])
    internal = me.read_metrics_csv(ctx.path("metrics_internal", kind))
    selected = sc.select_labels(internal, rule)
    payload = {
        "config_digest": ctx.digest,
        "kind": kind,
        "rule": rule.to_json(),
        "selected": [sc.selected_to_json(s) for s in selected],
    }
    with open(ctx.path("selected", kind), "w") as f:
        json.dump(payload, f, indent=1, sort_keys=True)
        f.write("\n")
    return {"kind": kind, "n_selected": len(selected)}


def stage_replicate(ctx: RunContext, kind: str) -> dict:
    with open(ctx.path("selected", kind)) as f:
        payload = json.load(f)
    if payload["config_digest"] != ctx.digest:
        raise DigestMismatch(f"selected list for {kind} has a different config digest")
    selected = [sc.selected_from_json(s) for s in payload["selected"]]
    external = me.read_metrics_csv(ctx.path("metrics_external", kind))
    replicated = sc.replicate(selected, external)
    payload = {
        "config_digest": ctx.digest,
        "kind": kind,
        "rule": payload["rule"],
        "selected": [sc.selected_to_json(s) for s in replicated],
    }
    with open(ctx.path("replicated", kind), "w") as f:
        json.dump(payload, f, indent=1, sort_keys=True)
        f.write("\n")
    return {
        "kind": kind,
        "n_selected": len(replicated),
        "n_replicated": sum(1 for s in replicated if s.replicated),
    }


def stage_report(ctx: RunContext) -> dict:
    selected: list[sc.SelectedLabel] = []
    digests = set()
    for kind in ctx.cfg["kinds"]:
        with open(ctx.path("replicated", kind)) as f:
            payload = json.load(f)
        digests.add(payload["config_digest"])
        selected.extend(sc.selected_from_json(s) for s in payload["selected"])
    if len(digests) > 1:
        raise DigestMismatch(f"mixed config digests across inputs: {sorted(digests)}")
    if digests and digests != {ctx.digest}:
        raise DigestMismatch("replicated lists were produced under a different config")
    metadata = {
        "config_digest": ctx.digest,
        "seed": ctx.cfg["seed"],
        "kinds": list(ctx.cfg["kinds"]),
        "preset": ctx.cfg.get("preset"),
        "rule": ctx.cfg["rule"],
        "dataset_digests": {
            "ecgb": _sha256_file(ctx.data_path("ecgb")),
            "episodes": _sha256_file(ctx.data_path("episodes")),
        },
    }
    report = sc.emit_report(selected, metadata, ctx.path("report_json"),
                            ctx.path("report_csv"))
    return {"n_selected": len(report.selected),
            "n_replicated": sum(1 for s in report.selected if s.replicated)}


# --- stage wiring ---------------------------------------------------------

def _needs_synth_first(ctx: RunContext) -> bool:
    return ctx.cfg["synth"] is not None and ctx.cfg["paths"]["ecgb"] is None


def run_synth(ctx: RunContext) -> None:
    outputs = [ctx.path("ecgb"), ctx.path("episodes"), ctx.path("ecg_meta")]
    run_stage(ctx, "synth", [], outputs, lambda: stage_synth(ctx))


def run_link(ctx: RunContext) -> None:
    inputs = [ctx.data_path("ecgb"), ctx.data_path("episodes")]
    run_stage(ctx, "link", inputs, [ctx.path("links")], lambda: stage_link(ctx))


def run_labels(ctx: RunContext) -> None:
    inputs = [ctx.data_path("episodes"), ctx.path("links")]
    for kind in ctx.cfg["kinds"]:
        run_stage(ctx, f"labels:{kind}", inputs, [ctx.path("vocab", kind)],
                  lambda kind=kind: stage_labels(ctx, kind))


def run_split(ctx: RunContext) -> None:
    inputs = [ctx.data_path("ecgb"), ctx.path("links")]
    run_stage(ctx, "split", inputs, [ctx.path("split")], lambda: stage_split(ctx))


def run_train(ctx: RunContext, stage: int) -> None:
    for kind in ctx.cfg["kinds"]:
        inputs = [ctx.data_path("ecgb"), ctx.data_path("episodes"),
                  ctx.path("links"), ctx.path("split"), ctx.path("vocab", kind)]
        if stage == 2:
            inputs.append(ctx.path("model1", kind))
        run_stage(ctx, f"train{stage}:{kind}", inputs,
                  [ctx.path(f"model{stage}", kind)],
                  lambda kind=kind: stage_train(ctx, kind, stage))


def run_eval(ctx: RunContext, stage: int) -> None:
    suffix = "internal" if stage == 1 else "external"
    for kind in ctx.cfg["kinds"]:
        inputs = [ctx.data_path("ecgb"), ctx.data_path("episodes"),
                  ctx.path("links"), ctx.path("split"), ctx.path("vocab", kind),
                  ctx.path(f"model{stage}", kind)]
        outputs = [ctx.path(f"metrics_{suffix}", kind),
                   ctx.path(f"preds_{suffix}", kind),
                   ctx.path(f"audit_{suffix}", kind)]
        run_stage(ctx, f"eval{stage}:{kind}", inputs, outputs,
                  lambda kind=kind: stage_eval(ctx, kind, stage))


def run_select(ctx: RunContext) -> None:
    for kind in ctx.cfg["kinds"]:
        run_stage(ctx, f"select:{kind}", [ctx.path("metrics_internal", kind)],
                  [ctx.path("selected", kind)],
                  lambda kind=kind: stage_select(ctx, kind))


def run_replicate(ctx: RunContext) -> None:
    for kind in ctx.cfg["kinds"]:
        inputs = [ctx.path("selected", kind), ctx.path("metrics_external", kind)]
        run_stage(ctx, f"replicate:{kind}", inputs, [ctx.path("replicated", kind)],
                  lambda kind=kind: stage_replicate(ctx, kind))


def run_report(ctx: RunContext) -> None:
    inputs = [ctx.path("replicated", kind) for kind in ctx.cfg["kinds"]]
    run_stage(ctx, "report", inputs, [ctx.path("report_json"), ctx.path("report_csv")],
              lambda: stage_report(ctx))


def run_pipeline(ctx: RunContext) -> None:
    if _needs_synth_first(ctx):
        run_synth(ctx)
    run_link(ctx)
    run_labels(ctx)
    run_split(ctx)
    run_train(ctx, 1)
    run_eval(ctx, 1)
    run_select(ctx)
    run_train(ctx, 2)
    run_eval(ctx, 2)
    run_replicate(ctx)
    run_report(ctx)


# --- argument parsing -----------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def make_context(args) -> RunContext:
    config_path = Path(args.config)
    if not config_path.exists():
        raise ConfigError(f"config file not found: {config_path}")
    with open(config_path) as f:
        try:
            raw = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}")
    cfg = resolve_config(raw, out=args.out, kind=args.kind, seed=args.seed)
    out = Path(cfg["paths"]["out"])
    for sub in ("data", "work", "models"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    return RunContext(cfg=cfg, digest=config_digest(cfg), out=out, force=args.force)


_COMMANDS: dict[str, Callable[[RunContext], None]] = {
    "synth": run_synth,
    "link": run_link,
    "labels": run_labels,
    "split": run_split,
    "select": run_select,
    "replicate": run_replicate,
    "report": run_report,
    "pipeline": run_pipeline,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ecgscreen",
                     description="ICD-wide ECG screening pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("synth", "link", "labels", "split", "train", "eval",
                 "select", "replicate", "report", "pipeline"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="run config JSON")
        p.add_argument("--out", default=None, help="output directory override")
        p.add_argument("--kind", choices=("code", "category", "both"), default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--force", action="store_true",
                       help="re-run even when digests match")
        if name in ("train", "eval"):
            p.add_argument("--stage", type=int, choices=(1, 2), default=1)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        ctx = make_context(args)
        with OutputLock(ctx.out):
            if args.command == "train":
                run_train(ctx, args.stage)
            elif args.command == "eval":
                run_eval(ctx, args.stage)
            else:
                _COMMANDS[args.command](ctx)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except EcgScreenError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""End-to-end experiment runner: data, pretraining, the selected method,
metrics CSV/summary artifacts, and multi-seed sweeps."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import checkpoint
from .config import ExperimentConfig, config_hash, to_dict, validate_config
from .data import DataBundle, gen_ssl_benchmark, gen_uda_benchmark, load_csv
from .distill import (TrainContext, make_stage_plan, pretrain, run_baseline,
                      train_customkd)
from .losses import LossWeights
from .metrics import accuracy
from .models import Model, init_head, init_projection, linear_probe, set_trainable

METRIC_COLUMNS = ("epoch", "stage", "loss_labeled", "loss_unlabeled",
                  "loss_feat_general", "loss_feat_custom", "loss_pred",
                  "loss_total", "train_acc", "eval_acc", "cka_fs_ft", "cka_fs_ftilde")

SWEEP_AXES = {
    "teacher_scale": ("teacher", "preset", str),
    "method": ("train", "method", str),
    "ratio": ("train", "ratio_k", int),
    "lambda_u": ("train", "lambda_u", float),
    "lambda_ft": ("train", "lambda_ft", float),
    "lambda_ftilde": ("train", "lambda_ftilde", float),
}


class StageError(RuntimeError):
    """A pipeline stage failed; the stage name tags the message."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class MetricsLog:
    """Per-epoch metric rows plus the run summary."""

    rows: list[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def csv_text(self) -> str:
        def fmt(v):
            if v is None:
                return ""
            if isinstance(v, float):
                return f"{v:.17g}"
            return str(v)

        lines = [",".join(METRIC_COLUMNS)]
        for row in self.rows:
            lines.append(",".join(fmt(row.get(col)) for col in METRIC_COLUMNS))
        return "\n".join(lines) + "\n"

    def write(self, out_dir: Path) -> None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "metrics.csv").write_text(self.csv_text())
        lines = [f"{k}: {v}" for k, v in self.summary.items()]
        (out_dir / "summary.txt").write_text("\n".join(lines) + "\n")

    def final_eval_acc(self) -> float:
        accs = [row["eval_acc"] for row in self.rows if row.get("eval_acc") is not None]
        if not accs:
            raise ValueError("run produced no eval accuracy rows")
        return accs[-1]


def _stage(name: str):
    class _Ctx:
        def __enter__(self):
            return self

        def __exit__(self, exc_type, exc, tb):
            if exc is not None and not isinstance(exc, StageError):
                raise StageError(name, exc) from exc
            return False

    return _Ctx()


def build_bundle(cfg: ExperimentConfig) -> DataBundle:
    b = cfg.benchmark
    _, _, pool_per_class = cfg.teacher.resolved()
    if b.kind == "uda":
        return gen_uda_benchmark(
            classes=b.classes, dim=b.dim, per_class=b.per_class,
            unlabeled_per_class=b.unlabeled_per_class, eval_per_class=b.eval_per_class,
            rotation_deg=b.rotation_deg, translation=b.translation, noise=b.noise,
            target_noise=b.target_noise, radius=b.radius,
            pool_per_class=pool_per_class, style_dims=b.style_dims,
            style_scale=b.style_scale, style_shift=b.style_shift, seed=cfg.seed)
    if b.kind == "ssl":
        return gen_ssl_benchmark(
            classes=b.classes, dim=b.dim, labels_per_class=b.labels_per_class,
            unlabeled_count=b.unlabeled_count, eval_count=b.eval_count,
            noise=b.noise, radius=b.radius, pool_per_class=pool_per_class,
            style_dims=b.style_dims, style_scale=b.style_scale, seed=cfg.seed)
    return load_csv(b.path)


def _seed_ints(seed: int, n: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None,
                   teacher_cache: dict | None = None) -> MetricsLog:
    """Run the configured pipeline; write metrics.csv, summary.txt and
    checkpoints under <out_dir>/<config-hash>/ when out_dir is given."""
    t0 = time.perf_counter()
    run_hash = config_hash(cfg)
    out = Path(out_dir) / run_hash if out_dir is not None else None
    log = MetricsLog()
    try:
        with _stage("config"):
            validate_config(cfg)
        (seed_teacher, seed_student, seed_proj_t, seed_proj_s,
         seed_fc_head, seed_probe, seed_train) = _seed_ints(cfg.seed, 7)
        tr = cfg.train

        with _stage("data"):
            bundle = build_bundle(cfg)
            classes = bundle.classes

        with _stage("teacher-pretrain"):
            if bundle.pool_x is None or len(bundle.pool_x) == 0:
                raise ValueError("teacher pretraining needs a labeled pool")
            t_hidden, t_embed, _ = cfg.teacher.resolved()
            cache_key = None
            if teacher_cache is not None:
                cache_key = (repr(to_dict(cfg)["benchmark"]),
                             repr(to_dict(cfg)["teacher"]), cfg.seed)
            if teacher_cache is not None and cache_key in teacher_cache:
                teacher = teacher_cache[cache_key]
            else:
                teacher, _ = pretrain([bundle.dim, *t_hidden, t_embed], classes,
                                      bundle.pool_x, bundle.pool_y,
                                      cfg.teacher.epochs, cfg.teacher.lr, seed_teacher,
                                      batch_size=tr.batch_size, momentum=tr.momentum)
                if teacher_cache is not None:
                    teacher_cache[cache_key] = teacher
            set_trainable(teacher.parameters().values(), False)
            teacher_pool_acc = accuracy(teacher, bundle.eval_x, bundle.eval_y)

        with _stage("student-pretrain"):
            student, pre_rows = pretrain([bundle.dim, *cfg.student.hidden, cfg.student.embed],
                                         classes, bundle.labeled_x, bundle.labeled_y,
                                         cfg.student.epochs, cfg.student.lr, seed_student,
                                         batch_size=tr.batch_size, momentum=tr.momentum)
            source_only_acc = accuracy(student, bundle.eval_x, bundle.eval_y)
            if pre_rows:
                pre_rows[-1]["train_acc"] = accuracy(student, bundle.labeled_x,
                                                     bundle.labeled_y)
                pre_rows[-1]["eval_acc"] = source_only_acc
            log.rows.extend(pre_rows)

        probe_head = None
        probe_acc = None
        if tr.method in ("soft_target", "logits"):
            with _stage("linear-probe"):
                probe_head = linear_probe(teacher.encoder, bundle.labeled_x,
                                          bundle.labeled_y, classes, tr.probe_epochs,
                                          tr.probe_lr, seed_probe,
                                          batch_size=tr.batch_size, momentum=tr.momentum)
                probe_acc = accuracy(Model(teacher.encoder, probe_head),
                                     bundle.eval_x, bundle.eval_y)

        with _stage("train"):
            weights = LossWeights(tr.lambda_u, tr.lambda_ft, tr.lambda_ftilde)
            s_embed = cfg.student.embed
            needs_proj_t = tr.method == "customkd"
            needs_proj_s = (tr.method == "customkd" and tr.lambda_ft > 0) or \
                           (tr.method == "fitnet" and tr.lambda_ft > 0)
            ctx = TrainContext(
                student=student,
                teacher_encoder=teacher.encoder,
                data=bundle,
                weights=weights,
                proj_t=(init_projection(t_embed, s_embed, seed_proj_t, tr.use_bn)
                        if needs_proj_t else None),
                proj_s=(init_projection(s_embed, t_embed, seed_proj_s, tr.use_bn)
                        if needs_proj_s else None),
                batch_size=tr.batch_size,
                lr_student=tr.lr,
                lr_proj_t=tr.lr_proj,
                momentum=tr.momentum,
                seed=seed_train,
                fc_head=(init_head(s_embed, classes, seed_fc_head)
                         if tr.fc_head_init == "random" else None),
                reinit_proj_t=tr.reinit_proj_t,
                fc_warmup_passes=tr.fc_warmup_passes,
                proj_s_warmup_passes=tr.proj_s_warmup_passes,
                probe_head=probe_head,
                lambda_kd=tr.lambda_kd,
                temperature=tr.temperature if tr.temperature is not None else 4.0,
                clip_norm=tr.clip_norm,
            )
            if tr.method == "customkd":
                plan = make_stage_plan(tr.kd_epochs, tr.ratio_k) if tr.kd_epochs else []
                rows = train_customkd(ctx, plan, eval_every=tr.eval_every,
                                      cka_probes=tr.cka_probes)
            else:
                rows = run_baseline(tr.method, ctx, tr.kd_epochs,
                                    eval_every=tr.eval_every, cka_probes=tr.cka_probes)
            log.rows.extend(rows)

        with _stage("evaluate"):
            final_acc = accuracy(student, bundle.eval_x, bundle.eval_y)
            log.summary = {
                "config_hash": run_hash,
                "method": tr.method,
                "seed": cfg.seed,
                "final_eval_acc": f"{final_acc:.6f}",
                "final_eval_error": f"{1.0 - final_acc:.6f}",
                "source_only_eval_acc": f"{source_only_acc:.6f}",
                "teacher_pool_eval_acc": f"{teacher_pool_acc:.6f}",
                "teacher_probe_eval_acc": "" if probe_acc is None else f"{probe_acc:.6f}",
                "status": "complete",
            }

        if out is not None:
            with _stage("write-artifacts"):
                log.summary["wall_time_s"] = f"{time.perf_counter() - t0:.3f}"
                log.write(out)
                ckpt_dir = out / "checkpoints"
                ckpt_dir.mkdir(parents=True, exist_ok=True)
                checkpoint.save_checkpoint(ckpt_dir / "student.npz", {"student": student})
                parts: dict = {"student": student, "teacher_encoder": teacher.encoder}
                if ctx.proj_t is not None:
                    parts["proj_t"] = ctx.proj_t
                if ctx.proj_s is not None:
                    parts["proj_s"] = ctx.proj_s
                if probe_head is not None:
                    parts["probe_head"] = probe_head
                checkpoint.save_checkpoint(ckpt_dir / "final.npz", parts)
        return log
    except StageError as err:
        if out is not None:
            log.summary = {"config_hash": run_hash, "status": "incomplete",
                           "error": str(err)}
            log.write(out)
        raise


def run_sweep(base_cfg: ExperimentConfig, axis: str, values: list, seeds: list[int],
              out_dir: str | Path | None = None) -> list[dict]:
    """Cross product of an axis and seeds; failed cells are recorded, not
    fatal. Returns tidy rows (one per run plus one aggregate per value)."""
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}, expected one of {sorted(SWEEP_AXES)}")
    if not values or not seeds:
        raise ValueError("sweep needs non-empty axis values and seeds")
    section, fld, typ = SWEEP_AXES[axis]
    rows: list[dict] = []
    cache: dict = {}
    for value in values:
        value = typ(value)
        cell_accs = []
        for seed in seeds:
            cfg = replace(base_cfg,
                          **{section: replace(getattr(base_cfg, section), **{fld: value})},
                          seed=int(seed))
            row = {"axis": axis, "value": value, "seed": int(seed), "kind": "run",
                   "eval_acc": None, "eval_acc_std": None, "status": "ok"}
            try:
                log = run_experiment(cfg, out_dir=out_dir, teacher_cache=cache)
                row["eval_acc"] = log.final_eval_acc()
                cell_accs.append(row["eval_acc"])
            except Exception as exc:  # record and continue with other cells
                row["status"] = f"failed: {exc}"
            rows.append(row)
        if cell_accs:
            rows.append({"axis": axis, "value": value, "seed": None, "kind": "aggregate",
                         "eval_acc": float(np.mean(cell_accs)),
                         "eval_acc_std": float(np.std(cell_accs)),
                         "status": f"{len(cell_accs)}/{len(seeds)} ok"})
    if out_dir is not None:
        write_sweep_csv(rows, Path(out_dir) / f"sweep_{axis}.csv")
    return rows


def write_sweep_csv(rows: list[dict], path: Path) -> None:
    cols = ("axis", "value", "seed", "kind", "eval_acc", "eval_acc_std", "status")

    def fmt(v):
        if v is None:
            return ""
        if isinstance(v, float):
            return f"{v:.17g}"
        return str(v)

    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(cols)]
    for row in rows:
        lines.append(",".join(fmt(row.get(c)) for c in cols))
    path.write_text("\n".join(lines) + "\n")

"""Alternating feature-customization / knowledge-distillation training engine,
plus supervised pretraining and the single-stage baselines.

Stage rules: the customization stage trains only the teacher-side projector,
reading teacher features through the student's (frozen) head classifier; the
distillation stage trains the student and its projector while every
teacher-side part stays constant. Inference always runs encoder -> head, so
projectors never appear on the student's serving path.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import DataBundle, paired_batches, shuffled_batches
from .losses import (LossWeights, composite_loss, cross_entropy, entropy_min,
                     feature_mse, logit_mse_loss, soft_target_loss)
from .metrics import accuracy, extract_features, linear_cka
from .models import (CustomizationPipeline, Encoder, HeadClassifier, Model,
                     ProjectionHead, calibrate_logit_scale,
                     canonicalize_feature_scale, init_encoder, init_head,
                     init_projection, set_trainable, share_student_head)
from .optim import Sgd
from .tensor import Tensor

BASELINES = ("fitnet", "soft_target", "logits", "none")
PREDICTION_KINDS = ("soft_target", "logits")


def make_stage_plan(total_kd_epochs: int, ratio_k: int) -> list[str]:
    """Interleaved stage tokens: a customization epoch precedes distillation
    epoch e iff (e-1) mod ratio_k == 0, so ratio 1 alternates every epoch."""
    if total_kd_epochs <= 0 or ratio_k <= 0:
        raise ValueError(f"need positive plan args, got ({total_kd_epochs}, {ratio_k})")
    plan: list[str] = []
    for e in range(1, total_kd_epochs + 1):
        if (e - 1) % ratio_k == 0:
            plan.append("FC")
        plan.append("KD")
    return plan


@dataclass
class StagePlan:
    total_kd_epochs: int
    ratio_k: int = 1

    def sequence(self) -> list[str]:
        return make_stage_plan(self.total_kd_epochs, self.ratio_k)


@dataclass
class TrainContext:
    """Everything one training run needs; optimizers are per trainable group
    (the student group persists, the projector group is rebuilt each
    customization stage so its momentum never goes stale)."""

    student: Model
    teacher_encoder: Encoder
    data: DataBundle
    weights: LossWeights
    proj_t: ProjectionHead | None = None   # teacher embedding -> student embedding
    proj_s: ProjectionHead | None = None   # student embedding -> teacher embedding
    batch_size: int = 32
    lr_student: float = 0.05
    lr_proj_t: float = 0.05
    momentum: float = 0.9
    seed: int = 0
    fc_head: HeadClassifier | None = None  # random-head ablation; default shares the student head
    reinit_proj_t: bool = False            # re-draw the projector at each customization stage
    fc_warmup_passes: int = 9              # extra labeled passes inside the first customization stage
    proj_s_warmup_passes: int = 5          # student-projector pre-fit passes before distillation
    pred_kind: str | None = None           # prediction-level baseline loss, if any
    probe_head: HeadClassifier | None = None
    lambda_kd: float = 1.0
    temperature: float = 4.0
    clip_norm: float | None = 50.0         # global-norm gradient clip for both stage optimizers
    shuffle_rng: np.random.Generator = field(init=False)
    student_opt: Sgd = field(init=False)
    pipeline: CustomizationPipeline | None = field(init=False, default=None)

    def __post_init__(self):
        set_trainable(self.teacher_encoder.parameters().values(), False)
        if self.fc_head is not None:
            set_trainable(self.fc_head.parameters().values(), False)
        if self.probe_head is not None:
            set_trainable(self.probe_head.parameters().values(), False)
        self.shuffle_rng = np.random.default_rng(self.seed)
        self.rebuild_student_opt()

    def rebuild_student_opt(self) -> None:
        """Recreate the student optimizer group (used when the set of active
        loss terms changes which modules train)."""
        params = list(self.student.parameters().values())
        if self.proj_s is not None:
            params += list(self.proj_s.parameters().values())
        self.student_opt = Sgd(params, lr=self.lr_student, momentum=self.momentum,
                               clip_norm=self.clip_norm)

    def student_group(self) -> list[Tensor]:
        return list(self.student_opt.params)

    def proj_t_group(self) -> list[Tensor]:
        return list(self.proj_t.parameters().values()) if self.proj_t else []


def _enter_fc(ctx: TrainContext) -> None:
    set_trainable(ctx.student_group(), False)
    set_trainable(ctx.proj_t_group(), True)


def _enter_kd(ctx: TrainContext) -> None:
    set_trainable(ctx.proj_t_group(), False)
    set_trainable(ctx.student_group(), True)


def _calibrate_projector_bn(ctx: TrainContext) -> None:
    """Pin the teacher projector's running stats to the exact labeled-set
    statistics so eval-mode outputs match what customization just trained
    (a fresh EMA lags badly after a single one-epoch stage)."""
    proj = ctx.proj_t
    if proj is None or proj.bn is None:
        return
    f_t = ctx.teacher_encoder.forward(Tensor(ctx.data.labeled_x))
    pre_bn = T.add(T.matmul(f_t, proj.weight.detach()), proj.bias.detach())
    proj.bn.running_mean = pre_bn.data.mean(axis=0)
    proj.bn.running_var = pre_bn.data.var(axis=0)


def feature_customization_epoch(ctx: TrainContext, passes: int = 1) -> float:
    """One customization stage: `passes` labeled-data passes updating only the
    teacher-side projector; the teacher encoder and the wired head stay
    bitwise constant. Returns the last pass's mean CE."""
    if len(ctx.data.labeled_x) == 0:
        raise ValueError("feature customization needs non-empty labeled data")
    if ctx.proj_t is None:
        raise ValueError("feature customization needs a teacher-side projector")
    if ctx.reinit_proj_t:
        ctx.proj_t = init_projection(ctx.proj_t.input_dim, ctx.proj_t.output_dim,
                                     int(ctx.shuffle_rng.integers(2 ** 31)),
                                     use_bn=ctx.proj_t.use_bn)
    head = ctx.fc_head if ctx.fc_head is not None else ctx.student.head
    ctx.pipeline = share_student_head(
        CustomizationPipeline(ctx.teacher_encoder, ctx.proj_t, head), head)
    _enter_fc(ctx)
    opt = Sgd(ctx.proj_t_group(), lr=ctx.lr_proj_t, momentum=ctx.momentum,
              clip_norm=ctx.clip_norm)
    x, y = ctx.data.labeled_x, ctx.data.labeled_y
    mean_loss = float("nan")
    for _ in range(max(passes, 1)):
        losses = []
        for idx in shuffled_batches(len(x), ctx.batch_size, ctx.shuffle_rng):
            logits = ctx.pipeline.forward(Tensor(x[idx]), training=True)
            loss = cross_entropy(logits, y[idx])
            T.backward(loss)
            opt.step()
            losses.append(loss.item())
        mean_loss = float(np.mean(losses))
    _calibrate_projector_bn(ctx)
    return mean_loss


def _teacher_logits(ctx: TrainContext, f_t: Tensor) -> Tensor:
    if ctx.probe_head is None:
        raise ValueError(f"baseline {ctx.pred_kind!r} needs a linear-probed teacher head")
    return ctx.probe_head.forward(f_t)


def warmup_student_projector(ctx: TrainContext, passes: int) -> None:
    """Pre-fit the student-side projector to the teacher's features with the
    student frozen (the classic hint-regressor pre-training), so distillation
    starts from a meaningful general-feature residual instead of a random
    projection transient."""
    if ctx.proj_s is None or passes < 1:
        return
    set_trainable(ctx.student_group(), False)
    proj_params = list(ctx.proj_s.parameters().values())
    set_trainable(proj_params, True)
    opt = Sgd(proj_params, lr=ctx.lr_proj_t, momentum=ctx.momentum,
              clip_norm=ctx.clip_norm)
    n_lab, n_unl = len(ctx.data.labeled_x), len(ctx.data.unlabeled_x)
    for _ in range(passes):
        for lab_idx, unl_idx in paired_batches(n_lab, n_unl, ctx.batch_size,
                                               ctx.shuffle_rng):
            x_all = Tensor(np.concatenate([ctx.data.labeled_x[lab_idx],
                                           ctx.data.unlabeled_x[unl_idx]]))
            f_t = ctx.teacher_encoder.forward(x_all)
            f_s = ctx.student.encoder.forward(x_all)
            loss = feature_mse(ctx.proj_s.forward(f_s, training=True), f_t)
            T.backward(loss)
            opt.step()


def knowledge_distillation_epoch(ctx: TrainContext) -> dict:
    """One paired labeled/unlabeled pass updating the student group only.

    Loss terms whose weight is zero are skipped and recorded as 0, so the
    composite reduces exactly to the active terms. Teacher-side features are
    computed outside the gradient graph; the teacher projector runs in eval
    mode so its batch-norm buffers stay untouched.
    """
    n_lab, n_unl = len(ctx.data.labeled_x), len(ctx.data.unlabeled_x)
    if n_lab == 0 or n_unl == 0:
        raise ValueError("knowledge distillation needs labeled and unlabeled data")
    w = ctx.weights
    use_ftilde = w.lambda_ftilde > 0
    use_ft = w.lambda_ft > 0
    if use_ftilde and ctx.proj_t is None:
        raise ValueError("customized-feature loss needs the teacher-side projector")
    if use_ft and ctx.proj_s is None:
        raise ValueError("general-feature loss needs the student-side projector")
    need_teacher = use_ftilde or use_ft or ctx.pred_kind is not None
    _enter_kd(ctx)

    sums = {"loss_labeled": 0.0, "loss_unlabeled": 0.0, "loss_feat_general": 0.0,
            "loss_feat_custom": 0.0, "loss_pred": 0.0, "loss_total": 0.0}
    trace: list[float] = []
    pairs = paired_batches(n_lab, n_unl, ctx.batch_size, ctx.shuffle_rng)
    for lab_idx, unl_idx in pairs:
        x_lab, y_lab = ctx.data.labeled_x[lab_idx], ctx.data.labeled_y[lab_idx]
        x_all = Tensor(np.concatenate([x_lab, ctx.data.unlabeled_x[unl_idx]]))
        k = len(lab_idx)

        f_t = ctx.teacher_encoder.forward(x_all) if need_teacher else None
        f_s = ctx.student.encoder.forward(x_all)
        logits_lab = ctx.student.head.forward(T.slice_rows(f_s, 0, k))
        l_lab = cross_entropy(logits_lab, y_lab)
        l_unl = (entropy_min(ctx.student.head.forward(T.slice_rows(f_s, k, x_all.shape[0])))
                 if w.lambda_u > 0 else Tensor(0.0))
        l_ft = (feature_mse(ctx.proj_s.forward(f_s, training=True), f_t)
                if use_ft else Tensor(0.0))
        l_ftilde = (feature_mse(f_s, ctx.proj_t.forward(f_t, training=False))
                    if use_ftilde else Tensor(0.0))
        total = composite_loss(l_lab, l_unl, l_ft, l_ftilde, w)
        l_pred = Tensor(0.0)
        if ctx.pred_kind is not None:
            t_logits = _teacher_logits(ctx, f_t)
            s_logits = ctx.student.head.forward(f_s)
            if ctx.pred_kind == "soft_target":
                l_pred = soft_target_loss(s_logits, t_logits, ctx.temperature)
            elif ctx.pred_kind == "logits":
                l_pred = logit_mse_loss(s_logits, t_logits)
            else:
                raise ValueError(f"unknown prediction-level kind {ctx.pred_kind!r}")
            total = T.add(total, T.mul(l_pred, ctx.lambda_kd))
        T.backward(total)
        ctx.student_opt.step()

        for key, val in (("loss_labeled", l_lab), ("loss_unlabeled", l_unl),
                         ("loss_feat_general", l_ft), ("loss_feat_custom", l_ftilde),
                         ("loss_pred", l_pred), ("loss_total", total)):
            sums[key] += val.item()
        trace.append(l_lab.item())

    out = {key: val / len(pairs) for key, val in sums.items()}
    out["steps"] = len(pairs)
    out["labeled_trace"] = trace
    return out


def _cka_row(ctx: TrainContext, cap: int = 2048) -> dict:
    """CKA of student vs teacher features on the eval split, eval-mode BN."""
    x = ctx.data.eval_x
    f_s = extract_features(ctx.student.encoder.forward, x, "f_s", cap=cap)
    f_t = extract_features(ctx.teacher_encoder.forward, x, "f_t", cap=cap)
    row = {"cka_fs_ft": linear_cka(f_s, f_t)}
    if ctx.proj_t is not None:
        f_tilde = extract_features(
            lambda t: ctx.proj_t.forward(ctx.teacher_encoder.forward(t), training=False),
            x, "f~_t", cap=cap)
        row["cka_fs_ftilde"] = linear_cka(f_s, f_tilde)
    return row


def _eval_row(ctx: TrainContext, cka_probes: bool) -> dict:
    row = {"train_acc": accuracy(ctx.student, ctx.data.labeled_x, ctx.data.labeled_y),
           "eval_acc": accuracy(ctx.student, ctx.data.eval_x, ctx.data.eval_y)}
    if cka_probes:
        row.update(_cka_row(ctx))
    return row


def train_customkd(ctx: TrainContext, plan: list[str], eval_every: int = 1,
                   cka_probes: bool = False) -> list[dict]:
    """Run the staged plan in place and return per-epoch metric rows; the
    student's current head is re-shared into the teacher pipeline at the
    start of every customization stage."""
    if ctx.weights.lambda_ft == 0 and ctx.proj_s is not None:
        # the student-side projector never trains; keep it out of the optimizer
        set_trainable(ctx.proj_s.parameters().values(), False)
        ctx.proj_s = None
        ctx.rebuild_student_opt()
    if plan and ctx.weights.lambda_ft > 0:
        warmup_student_projector(ctx, ctx.proj_s_warmup_passes)
    rows: list[dict] = []
    epoch = 0
    first_fc = True
    total_epochs = sum(1 for tok in plan if tok == "KD")
    for token in plan:
        if token == "FC":
            passes = 1 + (ctx.fc_warmup_passes if first_fc else 0)
            first_fc = False
            fc_loss = feature_customization_epoch(ctx, passes=passes)
            rows.append({"epoch": epoch + 1, "stage": "FC",
                         "loss_labeled": fc_loss, "loss_total": fc_loss})
        elif token == "KD":
            epoch += 1
            stats = knowledge_distillation_epoch(ctx)
            row = {"epoch": epoch, "stage": "KD",
                   **{k: stats[k] for k in ("loss_labeled", "loss_unlabeled",
                                            "loss_feat_general", "loss_feat_custom",
                                            "loss_pred", "loss_total")}}
            if eval_every > 0 and (epoch % eval_every == 0 or epoch == total_epochs):
                row.update(_eval_row(ctx, cka_probes))
            rows.append(row)
        else:
            raise ValueError(f"unknown stage token {token!r}")
    return rows


def run_baseline(kind: str, ctx: TrainContext, kd_epochs: int, eval_every: int = 1,
                 cka_probes: bool = False) -> list[dict]:
    """Single-stage baselines sharing the distillation epoch machinery and the
    metric-row schema of the staged trainer."""
    if kind not in BASELINES:
        raise ValueError(f"unknown baseline {kind!r}, expected one of {BASELINES}")
    w = ctx.weights
    if kind == "fitnet":
        ctx.weights = LossWeights(w.lambda_u, w.lambda_ft, 0.0)
    elif kind == "none":
        ctx.weights = LossWeights(w.lambda_u, 0.0, 0.0)
    else:
        # prediction-level distillation replaces the entropy term entirely
        ctx.weights = LossWeights(0.0, 0.0, 0.0)
        ctx.pred_kind = kind
        if ctx.probe_head is None:
            raise ValueError(f"baseline {kind!r} needs a linear-probed teacher head")
    plan = ["KD"] * kd_epochs
    return train_customkd(ctx, plan, eval_every=eval_every, cka_probes=cka_probes)


def _pretrain_once(encoder_dims, classes, x, y, epochs, lr, seed, batch_size,
                   momentum) -> tuple[Model, list[dict]]:
    enc_seed, head_seed, shuffle_seed = np.random.SeedSequence(seed).spawn(3)
    model = Model(init_encoder(encoder_dims, np.random.default_rng(enc_seed)),
                  init_head(encoder_dims[-1], classes, np.random.default_rng(head_seed)))
    rng = np.random.default_rng(shuffle_seed)
    opt = Sgd(model.parameters().values(), lr=lr, momentum=momentum)
    rows = []
    for epoch in range(1, epochs + 1):
        losses = []
        for idx in shuffled_batches(len(x), batch_size, rng):
            loss = cross_entropy(model.forward(Tensor(x[idx])), y[idx])
            T.backward(loss)
            opt.step()
            losses.append(loss.item())
        rows.append({"epoch": epoch, "stage": "pretrain",
                     "loss_labeled": float(np.mean(losses)),
                     "loss_total": float(np.mean(losses))})
    return model, rows


def _alive_fraction(model: Model, x: np.ndarray) -> float:
    feats = model.encoder.forward(Tensor(x)).data
    return float((feats.max(axis=0) > 0.0).mean())


def pretrain(encoder_dims: list[int], classes: int, x: np.ndarray, y: np.ndarray,
             epochs: int, lr: float, seed: int, batch_size: int = 32,
             momentum: float = 0.9, normalize_features: bool = True
             ) -> tuple[Model, list[dict]]:
    """Supervised CE pretraining of a fresh encoder+head model.

    Narrow ReLU encoders occasionally die under plain SGD; a degenerate
    result (under half the embedding units alive on the training data)
    deterministically retries with a bumped seed, so the output stays a pure
    function of the arguments. After training, the embedding scale is
    canonicalized to unit RMS and the logit scale is calibrated, both
    prediction-preserving reparameterizations, unless normalize_features is
    off.
    """
    if len(x) == 0:
        raise ValueError("pretraining needs non-empty labeled data")
    attempt_seed = seed
    for _ in range(5):
        model, rows = _pretrain_once(encoder_dims, classes, x, y, epochs, lr,
                                     attempt_seed, batch_size, momentum)
        if epochs == 0 or _alive_fraction(model, x) >= 0.5:
            break
        attempt_seed += 1000003  # deterministic bump on a degenerate encoder
    if epochs > 0 and normalize_features:
        canonicalize_feature_scale(model, x)
        calibrate_logit_scale(model, x)
    return model, rows

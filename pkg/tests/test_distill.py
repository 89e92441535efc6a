import numpy as np
import pytest

from featkd import tensor as T
from featkd.data import gen_uda_benchmark, paired_batches
from featkd.distill import (TrainContext, feature_customization_epoch,
                            knowledge_distillation_epoch, make_stage_plan,
                            pretrain, run_baseline, train_customkd)
from featkd.losses import LossWeights, cross_entropy
from featkd.metrics import accuracy
from featkd.models import init_projection, set_trainable
from featkd.optim import Sgd
from featkd.tensor import Tensor, op_trace


def tiny_bundle(seed=0):
    return gen_uda_benchmark(classes=4, dim=8, per_class=12, unlabeled_per_class=16,
                             eval_per_class=12, pool_per_class=12, style_dims=2,
                             seed=seed)


def tiny_setup(seed=0, lambda_ft=10.0, lambda_ftilde=10.0, **ctx_kw):
    bundle = tiny_bundle(seed)
    teacher, _ = pretrain([8, 24, 16], 4, bundle.pool_x, bundle.pool_y, 6, 0.02, seed + 10)
    set_trainable(teacher.parameters().values(), False)
    student, _ = pretrain([8, 12, 6], 4, bundle.labeled_x, bundle.labeled_y, 6, 0.02, seed + 20)
    ctx_kw.setdefault("batch_size", 8)
    ctx_kw.setdefault("lr_student", 0.002)
    ctx_kw.setdefault("lr_proj_t", 0.02)
    ctx_kw.setdefault("seed", seed + 30)
    ctx_kw.setdefault("fc_warmup_passes", 1)
    ctx_kw.setdefault("proj_s_warmup_passes", 1)
    ctx = TrainContext(student=student, teacher_encoder=teacher.encoder, data=bundle,
                       weights=LossWeights(0.1, lambda_ft, lambda_ftilde),
                       proj_t=init_projection(16, 6, seed + 40),
                       proj_s=init_projection(6, 16, seed + 50),
                       **ctx_kw)
    return ctx


def param_bytes(params):
    return {k: v.data.tobytes() for k, v in params.items()}


def all_state(ctx):
    state = {}
    state.update({f"student.{k}": v for k, v in ctx.student.state_arrays().items()})
    state.update({f"teacher.{k}": v for k, v in ctx.teacher_encoder.state_arrays().items()})
    if ctx.proj_t is not None:
        state.update({f"proj_t.{k}": v for k, v in ctx.proj_t.state_arrays().items()})
    if ctx.proj_s is not None:
        state.update({f"proj_s.{k}": v for k, v in ctx.proj_s.state_arrays().items()})
    return {k: v.tobytes() for k, v in state.items()}


class TestStagePlan:
    def test_one_to_one(self):
        assert make_stage_plan(4, 1) == ["FC", "KD"] * 4

    def test_five_to_one(self):
        plan = make_stage_plan(10, 5)
        # customization precedes distillation epochs 1 and 6 only
        fc_positions = [i for i, tok in enumerate(plan) if tok == "FC"]
        kd_before_fc = [sum(1 for t in plan[:i] if t == "KD") for i in fc_positions]
        assert kd_before_fc == [0, 5]
        assert sum(1 for t in plan if t == "KD") == 10

    def test_ratio_exceeding_run(self):
        assert make_stage_plan(3, 30) == ["FC", "KD", "KD", "KD"]

    def test_invalid_args(self):
        with pytest.raises(ValueError):
            make_stage_plan(0, 1)
        with pytest.raises(ValueError):
            make_stage_plan(5, 0)


class TestFeatureCustomization:
    def test_zero_lr_keeps_projector(self):
        ctx = tiny_setup(lr_proj_t=0.0)
        before = param_bytes(ctx.proj_t.parameters())
        feature_customization_epoch(ctx)
        assert param_bytes(ctx.proj_t.parameters()) == before

    def test_frozen_parts_bitwise_constant(self):
        ctx = tiny_setup()
        enc_before = param_bytes(ctx.teacher_encoder.parameters())
        head_before = param_bytes(ctx.student.head.parameters())
        feature_customization_epoch(ctx)
        assert param_bytes(ctx.teacher_encoder.parameters()) == enc_before
        assert param_bytes(ctx.student.head.parameters()) == head_before

    def test_repeated_stages_reduce_ce(self):
        ctx = tiny_setup()
        first = feature_customization_epoch(ctx)
        last = first
        for _ in range(6):
            last = feature_customization_epoch(ctx)
        assert last < first

    def test_head_is_shared_storage(self):
        ctx = tiny_setup()
        feature_customization_epoch(ctx)
        assert ctx.pipeline.head is ctx.student.head
        ctx.student.head.weight.data[0, 0] = 123.0
        assert ctx.pipeline.head.weight.data[0, 0] == 123.0

    def test_random_head_variant_uses_fc_head(self):
        from featkd.models import init_head
        rand_head = init_head(6, 4, seed=99)
        ctx = tiny_setup(fc_head=rand_head)
        feature_customization_epoch(ctx)
        assert ctx.pipeline.head is rand_head

    def test_reinit_flag_redraws_projector(self):
        ctx = tiny_setup(reinit_proj_t=True)
        first = ctx.proj_t
        feature_customization_epoch(ctx)
        assert ctx.proj_t is not first
        ctx2 = tiny_setup(reinit_proj_t=False)
        keep = ctx2.proj_t
        feature_customization_epoch(ctx2)
        assert ctx2.proj_t is keep

    def test_empty_labeled_rejected(self):
        ctx = tiny_setup()
        ctx.data.labeled_x = np.zeros((0, 8))
        with pytest.raises(ValueError, match="labeled"):
            feature_customization_epoch(ctx)


class TestKnowledgeDistillation:
    def test_teacher_side_bitwise_constant(self):
        ctx = tiny_setup()
        feature_customization_epoch(ctx)
        frozen = {**{f"t.{k}": v for k, v in
                     param_bytes(ctx.teacher_encoder.parameters()).items()},
                  **{f"p.{k}": v.data.tobytes()
                     for k, v in ctx.proj_t.parameters().items()}}
        bn = (ctx.proj_t.bn.running_mean.tobytes(), ctx.proj_t.bn.running_var.tobytes())
        knowledge_distillation_epoch(ctx)
        after = {**{f"t.{k}": v for k, v in
                    param_bytes(ctx.teacher_encoder.parameters()).items()},
                 **{f"p.{k}": v.data.tobytes()
                    for k, v in ctx.proj_t.parameters().items()}}
        assert after == frozen
        assert (ctx.proj_t.bn.running_mean.tobytes(),
                ctx.proj_t.bn.running_var.tobytes()) == bn

    def test_zero_weights_reduce_to_plain_ce(self):
        # the composite with all lambdas zero must follow a plain CE loop
        ctx = tiny_setup(lambda_ft=0.0, lambda_ftilde=0.0)
        ctx.weights = LossWeights(0.0, 0.0, 0.0)
        ctx.proj_s = None
        ctx.proj_t = None
        ctx.rebuild_student_opt()
        stats = knowledge_distillation_epoch(ctx)

        # independent plain-CE loop over the same batch pairing
        ctx2 = tiny_setup(lambda_ft=0.0, lambda_ftilde=0.0)
        rng = np.random.default_rng(ctx2.seed)
        pairs = paired_batches(len(ctx2.data.labeled_x), len(ctx2.data.unlabeled_x),
                               ctx2.batch_size, rng)
        opt = Sgd(ctx2.student.parameters().values(), lr=ctx2.lr_student,
                  momentum=ctx2.momentum, clip_norm=ctx2.clip_norm)
        trace = []
        for lab_idx, _ in pairs:
            logits = ctx2.student.forward(Tensor(ctx2.data.labeled_x[lab_idx]))
            loss = cross_entropy(logits, ctx2.data.labeled_y[lab_idx])
            T.backward(loss)
            opt.step()
            trace.append(loss.item())
        np.testing.assert_allclose(stats["labeled_trace"], trace, atol=1e-12)

    def test_zero_lr_keeps_feature_loss_at_start_value(self):
        # identical spaces wired so the customized feature equals the student
        # feature at the start: the loss term opens at exactly zero
        ctx = tiny_setup()
        ctx.teacher_encoder = ctx.student.encoder
        ctx.proj_t = init_projection(6, 6, 0, use_bn=False)
        ctx.proj_t.weight.data[:] = np.eye(6)
        ctx.proj_t.bias.data[:] = 0.0
        ctx.proj_s = None
        ctx.weights = LossWeights(0.1, 0.0, 10.0)
        ctx.lr_student = 0.0
        ctx.rebuild_student_opt()
        stats = knowledge_distillation_epoch(ctx)
        assert stats["loss_feat_custom"] == 0.0

    def test_empty_sets_rejected(self):
        ctx = tiny_setup()
        ctx.data.unlabeled_x = np.zeros((0, 8))
        with pytest.raises(ValueError, match="unlabeled"):
            knowledge_distillation_epoch(ctx)

    def test_partition_exact(self):
        ctx = tiny_setup()
        before = all_state(ctx)
        feature_customization_epoch(ctx)
        mid = all_state(ctx)
        fc_changed = {k for k in before if before[k] != mid[k]}
        assert fc_changed and all(k.startswith("proj_t.") for k in fc_changed)
        knowledge_distillation_epoch(ctx)
        after = all_state(ctx)
        kd_changed = {k for k in mid if mid[k] != after[k]}
        assert kd_changed
        assert all(k.startswith(("student.", "proj_s.")) for k in kd_changed)


class TestTrainLoop:
    def test_empty_plan_returns_student_unchanged(self):
        ctx = tiny_setup()
        before = param_bytes(ctx.student.parameters())
        rows = train_customkd(ctx, [])
        assert rows == []
        assert param_bytes(ctx.student.parameters()) == before

    def test_same_seed_identical_log(self):
        r1 = train_customkd(tiny_setup(), make_stage_plan(4, 1), eval_every=2)
        r2 = train_customkd(tiny_setup(), make_stage_plan(4, 1), eval_every=2)
        assert r1 == r2

    def test_realized_stages_match_plan(self):
        for ratio in (1, 3):
            plan = make_stage_plan(6, ratio)
            rows = train_customkd(tiny_setup(), plan, eval_every=0)
            assert [r["stage"] for r in rows] == plan

    def test_improves_over_source_only(self):
        ctx = tiny_setup()
        base = accuracy(ctx.student, ctx.data.eval_x, ctx.data.eval_y)
        train_customkd(ctx, make_stage_plan(10, 1), eval_every=0)
        final = accuracy(ctx.student, ctx.data.eval_x, ctx.data.eval_y)
        assert final >= base

    def test_inference_path_unchanged(self):
        ctx = tiny_setup()
        x = Tensor(ctx.data.eval_x[:4])
        trace_before = op_trace(ctx.student.forward(x))
        train_customkd(ctx, make_stage_plan(4, 1), eval_every=0)
        trace_after = op_trace(ctx.student.forward(x))
        assert trace_before == trace_after
        assert "batch_norm" not in trace_after  # projectors absent at inference

    def test_unknown_stage_token(self):
        with pytest.raises(ValueError, match="stage token"):
            train_customkd(tiny_setup(), ["FC", "XX"])


class TestBaselines:
    def test_fitnet_without_feature_weight_equals_none(self):
        ctx_a = tiny_setup(lambda_ft=0.0, lambda_ftilde=0.0)
        rows_a = run_baseline("fitnet", ctx_a, 3, eval_every=0)
        ctx_b = tiny_setup(lambda_ft=0.0, lambda_ftilde=0.0)
        rows_b = run_baseline("none", ctx_b, 3, eval_every=0)
        for ra, rb in zip(rows_a, rows_b):
            assert ra["loss_labeled"] == rb["loss_labeled"]
            assert ra["loss_total"] == rb["loss_total"]

    def test_soft_target_with_identical_logits_is_zero(self):
        ctx = tiny_setup()
        ctx.teacher_encoder = ctx.student.encoder
        ctx.probe_head = ctx.student.head
        ctx.proj_t = ctx.proj_s = None
        ctx.lr_student = 0.0
        ctx.temperature = 2.0
        ctx.rebuild_student_opt()
        rows = run_baseline("soft_target", ctx, 2, eval_every=0)
        assert all(r["loss_pred"] == 0.0 for r in rows)

    def test_prediction_kind_requires_probe(self):
        ctx = tiny_setup()
        ctx.probe_head = None
        with pytest.raises(ValueError, match="linear-probed"):
            run_baseline("logits", ctx, 1)

    def test_shared_schema_across_methods(self):
        keys = None
        for kind in ("none", "fitnet"):
            ctx = tiny_setup()
            rows = run_baseline(kind, ctx, 2, eval_every=1)
            row_keys = set(rows[-1])
            keys = row_keys if keys is None else keys
            assert row_keys == keys
        ck = train_customkd(tiny_setup(), make_stage_plan(2, 1), eval_every=1)
        assert set(r for r in ck[-1] if r != "epoch") <= keys | {"stage"}

    def test_unknown_kind(self):
        with pytest.raises(ValueError, match="unknown baseline"):
            run_baseline("rkd", tiny_setup(), 1)

    def test_baselines_never_touch_proj_t(self):
        ctx = tiny_setup()
        before = param_bytes(ctx.proj_t.parameters())
        run_baseline("fitnet", ctx, 2, eval_every=0)
        assert param_bytes(ctx.proj_t.parameters()) == before


class TestPretrain:
    def test_zero_epochs_returns_initialized_model(self):
        bundle = tiny_bundle()
        model, rows = pretrain([8, 12, 6], 4, bundle.labeled_x, bundle.labeled_y,
                               0, 0.05, seed=3)
        assert rows == []
        for b in model.encoder.biases:
            assert not b.data.any()

    def test_loss_decreases_endpoint(self):
        bundle = tiny_bundle()
        _, rows = pretrain([8, 12, 6], 4, bundle.labeled_x, bundle.labeled_y,
                           12, 0.02, seed=4)
        assert rows[-1]["loss_labeled"] < rows[0]["loss_labeled"]

    def test_deterministic(self):
        bundle = tiny_bundle()
        m1, _ = pretrain([8, 12, 6], 4, bundle.labeled_x, bundle.labeled_y, 5, 0.02, 7)
        m2, _ = pretrain([8, 12, 6], 4, bundle.labeled_x, bundle.labeled_y, 5, 0.02, 7)
        assert param_bytes(m1.parameters()) == param_bytes(m2.parameters())

    def test_teacher_beats_student_on_default_setup(self):
        bundle = gen_uda_benchmark(pool_per_class=40, seed=0)
        teacher, _ = pretrain([16, 64, 64, 64], 8, bundle.pool_x, bundle.pool_y,
                              30, 0.02, seed=1)
        student, _ = pretrain([16, 16, 16, 8], 8, bundle.labeled_x, bundle.labeled_y,
                              30, 0.02, seed=2)
        t_acc = accuracy(teacher, bundle.eval_x, bundle.eval_y)
        s_acc = accuracy(student, bundle.eval_x, bundle.eval_y)
        assert t_acc > s_acc

    def test_empty_data_rejected(self):
        with pytest.raises(ValueError, match="non-empty"):
            pretrain([8, 4], 2, np.zeros((0, 8)), np.zeros(0, dtype=int), 1, 0.1, 0)

    def test_normalization_preserves_predictions(self):
        bundle = tiny_bundle()
        raw, _ = pretrain([8, 12, 6], 4, bundle.labeled_x, bundle.labeled_y,
                          8, 0.02, seed=5, normalize_features=False)
        from featkd.models import calibrate_logit_scale, canonicalize_feature_scale
        before = raw.forward(Tensor(bundle.eval_x)).data.argmax(axis=1)
        canonicalize_feature_scale(raw, bundle.labeled_x)
        calibrate_logit_scale(raw, bundle.labeled_x)
        after = raw.forward(Tensor(bundle.eval_x)).data.argmax(axis=1)
        assert (before == after).all()

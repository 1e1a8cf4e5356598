"""Acceptance criteria 1-9, one PASS/FAIL line each.

The desk-scale trend runs (criteria 4-6) train real models and take a few
minutes each on one core.
"""

import math
import time

import numpy as np
import pytest
from scipy.stats import ortho_group

from mimlab import tensor as T
from mimlab.analysis import linear_cka, occlusion_invariance_curve
from mimlab.data import gen_synthetic
from mimlab.gradchecks import run_grad_checks
from mimlab.masking import sample_masks
from mimlab.objectives import AggregationStrategy, NegativePolicy, cmae_loss, infonce, mae_loss, rmae_loss
from mimlab.siamese import SiameseState, ema_update, siamese_objective, two_view_forward
from mimlab.storage import load_checkpoint, metrics_csv
from mimlab.training import TrainConfig, finetune, init_checkpoint, pretrain, subsample_dataset
from mimlab.vit import ViTConfig, init_params

from oracles import cmae_tokenwise_bruteforce, infonce_scalar, mae_loss_loops

TINY = ViTConfig(image_size=8, patch_size=4, embed_dim=8, depth=2, num_heads=2, mlp_ratio=2.0, decoder_dim=8,
                 decoder_depth=1, decoder_num_heads=2, proj_hidden_dim=8, proj_dim=4)

# pretraining lr for the trend runs (criteria 4-6): ten times the default base_lr
MAE_LR = 1.5e-3
RMAE_LR = 3.0e-3


def report(capsys, number: int, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"\ncriterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")


class TestGradientCorrectness:
    def test_criterion_1(self, capsys):
        t0 = time.perf_counter()
        worst = run_grad_checks(instances=10, seed=0)
        elapsed = time.perf_counter() - t0
        name, err = max(worst.items(), key=lambda kv: kv[1])
        ok = err < 1e-4 and elapsed < 60.0
        report(capsys, 1, ok, f"{len(worst)} checks x 10 instances, worst {name}={err:.2e}, {elapsed:.1f}s")
        assert err < 1e-4, worst
        assert elapsed < 60.0


class TestLossOracles:
    def test_criterion_2(self, capsys):
        rng = np.random.default_rng(2)
        errs = {}

        pred, target = rng.normal(size=(3, 8, 12)), rng.random((3, 8, 12))
        bits = sample_masks(3, 8, 0.75, rng)
        errs["mae"] = max(abs(mae_loss(pred, target, bits, pn).item()
                              - mae_loss_loops(pred.tolist(), target.tolist(), bits.tolist(), pn))
                          for pn in (True, False))

        params = init_params(TINY, rng)
        patches = rng.random((3, TINY.num_patches, TINY.patch_dim))
        rbits = sample_masks(3, TINY.num_patches, 0.5, rng)
        outs = {lam: rmae_loss(params, patches, rbits, lam) for lam in (0.0, 1.0, 2.5)}
        split_exact = all(o.total.item() == o.distance.item() + lam * o.constraint.item()
                          for lam, o in outs.items())
        # affine in lambda: both terms are lambda-free, so total moves only through lambda * constraint
        affine_exact = outs[0.0].total.item() == outs[0.0].distance.item() and \
            len({o.distance.item() for o in outs.values()}) == 1 and \
            len({o.constraint.item() for o in outs.values()}) == 1

        keys = np.tile(rng.normal(size=3), (7, 1))
        errs["infonce_uniform"] = abs(infonce(rng.normal(size=3), keys, 3).item() - math.log(7))
        q = np.array([1.0, 0.0])
        three = np.array([[2.0, 0.0], [-1.0, 0.0], [-3.0, 0.0]])
        errs["infonce_three_key"] = abs(infonce(q, three, 0, 0.2).item() - infonce_scalar(q, three, 0, 0.2))

        on, tg = rng.normal(size=(3, 5, 4)), rng.normal(size=(3, 5, 4))
        errs["cmae_tokenwise"] = max(
            abs(cmae_loss(on, tg, AggregationStrategy.TOKEN_WISE, 0.2, policy).item()
                - cmae_tokenwise_bruteforce(on, tg, 0.2, policy is NegativePolicy.ALL_TOKENS_ACROSS_BATCH))
            for policy in NegativePolicy)

        limits = {"mae": 1e-12, "infonce_uniform": 1e-10, "infonce_three_key": 1e-10, "cmae_tokenwise": 1e-9}
        ok = split_exact and affine_exact and all(errs[k] < limits[k] for k in limits)
        shown = ", ".join(f"{k}={v:.1e}" for k, v in errs.items())
        report(capsys, 2, ok, f"{shown}, rmae split exact={split_exact}, lambda-affine exact={affine_exact}")
        assert split_exact and affine_exact
        for k, limit in limits.items():
            assert errs[k] < limit, (k, errs[k])


class TestCKAProperties:
    def test_criterion_3(self, capsys):
        worst = 0.0
        for seed in range(10):
            rng = np.random.default_rng(seed)
            X = rng.normal(size=(64, 16))
            Y = X @ rng.normal(size=(16, 16)) + rng.normal(size=(64, 16))
            base = linear_cka(X, Y)
            Q = ortho_group.rvs(16, random_state=seed)
            worst = max(worst,
                        abs(linear_cka(X, X) - 1.0),
                        abs(linear_cka(Y, X) - base),
                        abs(linear_cka(X @ Q, Y) - base),
                        abs(linear_cka(X, Y @ Q) - base),
                        abs(linear_cka(3.7 * X, Y) - base),
                        abs(linear_cka(X, 0.02 * Y) - base))
        report(capsys, 3, worst < 1e-9, f"worst deviation {worst:.1e} over 10 random 64x16 pairs")
        assert worst < 1e-9


class TestOcclusionInvariance:
    def test_criterion_4(self, capsys):
        t0 = time.perf_counter()
        probe = gen_synthetic(256, seed=999).images
        mae_cka, sup_cka = [], []
        for seed in range(3):
            data = gen_synthetic(2000, seed=100 + seed)
            mae, _ = pretrain(TrainConfig.for_mode("mae", base_lr=MAE_LR, seed=seed), data)
            sup, _ = pretrain(TrainConfig.for_mode("supervised", total_epochs=20, seed=seed), data)
            last = [mae.vit_config.depth - 1]
            for ckpt, out in ((mae, mae_cka), (sup, sup_cka)):
                out.append(occlusion_invariance_curve(ckpt.params, probe, [0.5], seed=seed, blocks=last).values[0, 0])
        minutes = (time.perf_counter() - t0) / 60
        m, s = float(np.median(mae_cka)), float(np.median(sup_cka))
        ok = m - s >= 0.05 and m >= 0.7 and minutes <= 30
        report(capsys, 4, ok, f"final-block CKA at 0.5: MAE {np.round(mae_cka, 3).tolist()} median {m:.3f}, "
                              f"supervised {np.round(sup_cka, 3).tolist()} median {s:.3f}, {minutes:.1f} min")
        assert m - s >= 0.05
        assert m >= 0.7
        assert minutes <= 30


class TestReconstructionProgress:
    def test_criterion_5(self, capsys):
        data = gen_synthetic(512, seed=0)
        mae_gain, rmae_gain = [], []
        for seed in range(3):
            _, log = pretrain(TrainConfig.for_mode("mae", base_lr=MAE_LR, patch_norm=False, seed=seed), data)
            mae_gain.append(log.records[-1]["psnr"] - log.records[0]["psnr"])
            _, log = pretrain(TrainConfig.for_mode("rmae", base_lr=RMAE_LR, patch_norm=False, seed=seed), data)
            rmae_gain.append(log.records[-1]["constraint_psnr"] - log.records[0]["constraint_psnr"])
        m, r = float(np.median(mae_gain)), float(np.median(rmae_gain))
        report(capsys, 5, m >= 3.0 and r >= 3.0,
               f"epoch 1->20 PSNR gain: MAE {np.round(mae_gain, 2).tolist()} median {m:.2f} dB, "
               f"R-MAE constraint {np.round(rmae_gain, 2).tolist()} median {r:.2f} dB")
        assert m >= 3.0
        assert r >= 3.0


class TestFewImageInit:
    def test_criterion_6(self, capsys):
        t0 = time.perf_counter()
        full = gen_synthetic(2000, seed=7)
        pre, scratch = [], []
        for seed in range(5):
            few = subsample_dataset(full, "random", 10, seed)
            # 5 short epochs, each a pass over 32 tiled copies of the 10 images
            ck, _ = pretrain(TrainConfig.for_mode("mae", base_lr=MAE_LR, repeats=32, total_epochs=5,
                                                  warmup_epochs=1, seed=seed), few)
            cfg = TrainConfig.for_mode("supervised", total_epochs=5, warmup_epochs=1, seed=seed)
            pre.append(finetune(ck, full, cfg)[0])
            scratch.append(finetune(None, full, cfg)[0])
        minutes = (time.perf_counter() - t0) / 60
        p, s = float(np.median(pre)), float(np.median(scratch))
        ok = p >= s and minutes <= 30
        report(capsys, 6, ok, f"fine-tune accuracy: 10-image MAE init {pre} median {p:.3f}, "
                              f"scratch {scratch} median {s:.3f}, {minutes:.1f} min")
        assert p >= s
        assert minutes <= 30


@pytest.fixture(scope="module")
def small_shapes():
    return gen_synthetic(64, seed=5)


class TestStrategyCoverage:
    def test_criterion_7(self, capsys, small_shapes):
        trajectories = {}
        for strategy in AggregationStrategy:
            cfg = TrainConfig.for_mode("cmae", strategy=strategy.value, total_epochs=2, warmup_epochs=1,
                                       batch_size=16, seed=0)
            _, log = pretrain(cfg, small_shapes)
            trajectories[strategy.value] = tuple(log.column("loss"))
        finite = all(math.isfinite(v) for t in trajectories.values() for v in t)
        distinct = len(set(trajectories.values())) == len(trajectories)

        # step 0: the untrained model on one batch
        cfg = TrainConfig.for_mode("cmae", seed=0)
        state = SiameseState.from_online(init_checkpoint(cfg).params)
        rng = np.random.default_rng(0)
        images = small_shapes.images[:8]
        bits = sample_masks(8, cfg.model.num_patches, cfg.mask_ratio, rng)
        with T.no_grad():
            out = two_view_forward(state, images, bits, None, rng)
            got = siamese_objective(out, AggregationStrategy.TOKEN_WISE).item()
        per_pair = []
        for online, target in out.pairs:
            o, t = online.data, target.data
            per_pair.append(np.mean([infonce_scalar(o[i, p], t[:, p], i, 0.2)
                                     for i in range(o.shape[0]) for p in range(1, o.shape[1])]))
        gap = abs(got - float(np.mean(per_pair)))
        ok = finite and distinct and gap < 1e-12
        report(capsys, 7, ok, f"{len(trajectories)} strategies finite={finite} distinct={distinct}, "
                              f"TokenWise vs per-token mean at step 0: {gap:.1e}")
        assert finite and distinct, trajectories
        assert gap < 1e-12


class TestDeterminism:
    def test_criterion_8(self, capsys, small_shapes, tmp_path):
        cfg = TrainConfig.for_mode("cmae", total_epochs=2, warmup_epochs=1, batch_size=16, seed=11)
        _, log_a = pretrain(cfg, small_shapes)
        _, log_b = pretrain(cfg, small_shapes)
        same_csv = metrics_csv(log_a.records).encode() == metrics_csv(log_b.records).encode()

        full, full_log = pretrain(cfg, small_shapes)
        pretrain(cfg, small_shapes, stop_after_epoch=1, checkpoint_path=tmp_path / "half.ckpt")
        resumed, resumed_log = pretrain(cfg, small_shapes, resume=load_checkpoint(tmp_path / "half.ckpt"))
        same_params = all(np.array_equal(resumed.params[k].data, t.data) for k, t in full.params.items())
        same_target = all(np.array_equal(resumed.target[k].data, t.data) for k, t in full.target.items())
        same_log = metrics_csv(resumed_log.records) == metrics_csv(full_log.records)
        ok = same_csv and same_params and same_target and same_log
        report(capsys, 8, ok, f"repeat CSV identical={same_csv}, resume params={same_params} "
                              f"target={same_target} metrics={same_log}")
        assert ok


class TestStopGradient:
    def test_criterion_9(self, capsys):
        cfg = ViTConfig(**{**TINY.to_dict(), "mask_handling": "mask_token"})
        rng = np.random.default_rng(9)
        state = SiameseState.from_online(init_params(cfg, rng))
        for _, t in state.target.items():
            t.data = t.data + rng.normal(scale=0.1, size=t.shape)
            t.requires_grad = True
        bits = sample_masks(4, cfg.num_patches, 0.5, rng)
        siamese_objective(two_view_forward(state, rng.random((4, 3, 8, 8)), bits, None, rng)).backward()
        target_zero = all(t.grad is None or not np.any(t.grad) for _, t in state.target.items())
        online_moved = any(t.grad is not None and np.any(t.grad) for _, t in state.online.items())

        online = {k: t.data.copy() for k, t in state.online.items()}
        before = {k: t.data.copy() for k, t in state.target.items()}
        ema_update(state, 1.0)
        keep = all(np.array_equal(state.target[k].data, v) for k, v in before.items())
        ema_update(state, 0.0)
        copy = all(np.array_equal(state.target[k].data, v) for k, v in online.items())
        ok = target_zero and online_moved and keep and copy
        report(capsys, 9, ok, f"target grads zero={target_zero}, m=1 keeps target={keep}, m=0 copies online={copy}")
        assert ok

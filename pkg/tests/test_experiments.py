import json
import math

import numpy as np
import pytest

from scaleq import experiments as ex
from scaleq.errors import ContractError
from scaleq.experiments import ExperimentConfig
from scaleq.tensor import Rng


def quick_config(**kw):
    base = dict(seed=7, trials=1, shape=(2, 8, 16, 16),
                sigma_grid=(0.2, 0.5, 0.8), ratios=(2, 4),
                image_size=48, dataset_size=16, audit_seeds=2,
                audit_dataset=8, stats_batch=4, head_channels=8,
                encoder_widths=(4, 8, 8, 8, 8), train_steps=6, batch_size=4)
    base.update(kw)
    return ExperimentConfig(**base)


# ---------------------------------------------------------------------------
# synthetic dataset
# ---------------------------------------------------------------------------

def test_dataset_deterministic():
    a = ex.gen_synthetic_dataset(3, 4, 4, 32)
    b = ex.gen_synthetic_dataset(3, 4, 4, 32)
    for sa, sb in zip(a, b):
        np.testing.assert_array_equal(sa.image, sb.image)
        np.testing.assert_array_equal(sa.mask, sb.mask)
    c = ex.gen_synthetic_dataset(4, 4, 4, 32)
    assert any(np.any(sa.mask != sc.mask) for sa, sc in zip(a, c))


def test_dataset_shapes_and_coverage():
    samples = ex.gen_synthetic_dataset(1, 8, 4, 48)
    assert len(samples) == 8
    hist = np.zeros(4)
    for s in samples:
        assert s.image.shape == (1, 3, 48, 48)
        assert s.mask.shape == (1, 48, 48)
        hist += np.bincount(s.mask.ravel(), minlength=4)
    shares = hist / hist.sum()
    assert np.all(shares > 0.0)
    assert shares[0] > 0.2                      # background dominates


def test_dataset_contracts():
    with pytest.raises(ContractError):
        ex.gen_synthetic_dataset(0, 0)
    with pytest.raises(ContractError):
        ex.gen_synthetic_dataset(0, 4, n_classes=1)
    with pytest.raises(ContractError):
        ex.gen_synthetic_dataset(0, 4, n_classes=9)


def test_dataset_batches():
    samples = ex.gen_synthetic_dataset(2, 5, 4, 32)
    batches = list(ex.dataset_batches(samples, 2))
    assert [b[0].shape[0] for b in batches] == [2, 2, 1]
    assert batches[0][1].shape == (2, 32, 32)


# ---------------------------------------------------------------------------
# fig2
# ---------------------------------------------------------------------------

def test_fig2_rows_and_decrease(tmp_path):
    cfg = quick_config(out_dir=str(tmp_path), align_corners="both")
    rows = ex.run_fig2(cfg)
    # (grid + reference sigma) x ratios x align modes
    assert len(rows) == 4 * 2 * 2
    assert sum(r["is_reference"] for r in rows) == 4
    checks = ex.fig2_checks(rows)
    assert checks["all_decreased"]
    assert all(r["config_hash"] == cfg.hash() for r in rows)
    csv = (tmp_path / "fig2.csv").read_text().strip().splitlines()
    assert csv[0] == "sigma,r,mode,var_before,var_after,is_reference,config_hash"
    assert len(csv) == len(rows) + 1
    summary = json.loads((tmp_path / "fig2_summary.json").read_text())
    assert summary["checks"]["all_decreased"] is True


def test_fig2_reference_sigma_is_relu_bn_variance():
    cfg = quick_config(align_corners="false")
    rows = ex.run_fig2(cfg)
    ref = [r for r in rows if r["is_reference"]]
    for r in ref:
        assert r["sigma"] == pytest.approx(math.sqrt(ex.RELU_BN_VAR))
        assert r["var_before"] == pytest.approx(ex.RELU_BN_VAR, rel=0.2)


# ---------------------------------------------------------------------------
# prop1
# ---------------------------------------------------------------------------

def test_prop1_rows_and_checks():
    cfg = quick_config(audit_seeds=8)
    rows = ex.run_prop1(cfg)
    assert len(rows) == 8 * 2 * 2
    checks = ex.prop1_checks(rows)
    assert abs(checks["ratio10_baseline"] - 10.0) < 1.5
    assert abs(checks["ratio10_equalized"] - 1.0) < 0.2
    assert abs(checks["ratio1_baseline"] - 1.0) < 0.2


# ---------------------------------------------------------------------------
# head audit
# ---------------------------------------------------------------------------

def test_head_audit_quick(tmp_path):
    cfg = quick_config(out_dir=str(tmp_path))
    res = ex.run_head_audit(cfg, "psphead")
    assert len(res["seeds"]) == 2
    assert len(res["rows"]) == 2 * 5
    for s in res["seeds"]:
        assert s["eq_unit_moments"]
        assert s["smoothed_below"] and s["none_above"]
    assert res["summary"]["r1_max_ok"]
    assert res["summary"]["equalized_unit_moments_ok"]
    assert (tmp_path / "head_audit_psphead.csv").exists()
    assert (tmp_path / "head_audit_psphead_summary.json").exists()


def test_head_audit_fcn_single_branch():
    res = ex.run_head_audit(quick_config(), "fcnhead")
    assert all(s["spread"] == 1.0 for s in res["seeds"])
    assert "eq_spread_ok" not in res["summary"]


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def test_toy_train_runs_and_is_deterministic(tmp_path):
    out1 = tmp_path / "a"
    out2 = tmp_path / "b"
    out1.mkdir()
    out2.mkdir()
    cfg1 = quick_config(head="fcnhead", out_dir=str(out1))
    ex.run_toy_train(cfg1)
    ex.run_toy_train(quick_config(head="fcnhead", out_dir=str(out2)))
    assert (out1 / "train.csv").read_bytes() == (out2 / "train.csv").read_bytes()
    rows = (out1 / "train.csv").read_text().strip().splitlines()
    assert rows[0] == "arm,step,loss,pixel_acc,miou,config_hash"
    assert len(rows) == 1 + 2 * 6                  # two arms x six steps


def test_toy_train_loss_moves_down():
    res = ex.run_toy_train(quick_config(head="fcnhead", train_steps=12,
                                        lr=0.1, equalize="off"))
    checks = res["checks"]
    assert set(checks) == {"baseline"}
    assert checks["baseline"]["all_finite"]
    assert checks["baseline"]["final_loss"] < checks["baseline"]["initial_loss"]


# ---------------------------------------------------------------------------
# equivalence / calibrate / check
# ---------------------------------------------------------------------------

def test_run_equivalence():
    res = ex.run_equivalence(quick_config(), trials=10)
    assert res["pass"]
    assert res["max_pre_bn_diff"] <= 1e-10
    assert res["max_post_bn_diff"] <= 1e-10


def test_run_calibrate_psphead(tmp_path):
    cfg = quick_config(head="psphead", out_dir=str(tmp_path))
    res = ex.run_calibrate(cfg)
    assert res["equivalence_pass"]
    assert res["all_sigma_positive"]
    assert res["n_branches"] == 5
    assert (tmp_path / "stats_psphead.csv").exists()
    assert (tmp_path / "fusion_weight_psphead.seqt").exists()


def test_run_check_all_ok(tmp_path):
    cfg = ExperimentConfig(seed=11, out_dir=str(tmp_path))
    res = ex.run_check(cfg)
    assert res["ok"], {k: v for k, v in res["checks"].items() if not v["ok"]}
    assert set(res["checks"]) == {
        "unit_block_moments", "bilinear_decreases_variance",
        "nearest_conserves_variance", "equalizer_equivalence",
        "gradient_disequilibrium", "autodiff_finite_diff"}
    summary = json.loads((tmp_path / "check_summary.json").read_text())
    assert summary["checks"]["ok"] is True


def test_config_hash_stable_and_sensitive():
    assert quick_config().hash() == quick_config().hash()
    assert quick_config().hash() != quick_config(seed=8).hash()
    assert quick_config(out_dir="/x").hash() == quick_config(out_dir="/y").hash()

"""Metric definitions, equivariance harness, binned analysis, param counts."""

import numpy as np
import pytest

from tensorpol import tensor_algebra as ta
from tensorpol.data import synthetic_generator, teacher_alpha
from tensorpol.evaluation import (
    EquivReport,
    LengthMismatch,
    MetricReport,
    SizeBinnedReport,
    count_parameters,
    equiv_test,
    metrics,
    naive_metrics,
    param_count,
    relative_deviatoric_report,
)
from tensorpol.model import Model, ModelConfig


def random_pairs(n, seed=0):
    rng = np.random.default_rng(seed)
    preds = [ta.sym(rng.normal(size=(3, 3))) for _ in range(n)]
    targets = [ta.sym(rng.normal(size=(3, 3))) for _ in range(n)]
    return preds, targets


class TeacherModel:
    """Exactly equivariant reference predictor built on the analytic teacher."""

    def predict(self, mol):
        return teacher_alpha(mol.atomic_numbers, mol.positions)


class TestMetrics:
    def test_perfect_predictions(self):
        preds, _ = random_pairs(5)
        report = metrics(preds, preds)
        assert report.frob_mae == 0.0
        assert report.iso_mae == 0.0
        assert report.aniso_frob_mae == 0.0
        assert report.n_samples == 5

    def test_pure_trace_residual(self):
        target = np.zeros((3, 3))
        report = metrics([np.eye(3)], [target])
        assert report.frob_mae == pytest.approx(np.sqrt(3.0))
        assert report.iso_mae == pytest.approx(1.0)
        assert report.aniso_frob_mae == pytest.approx(0.0, abs=1e-15)

    def test_traceless_residual(self):
        report = metrics([np.diag([-1.0, 0.0, 1.0])], [np.zeros((3, 3))])
        assert report.frob_mae == pytest.approx(np.sqrt(2.0))
        assert report.iso_mae == pytest.approx(0.0, abs=1e-15)
        assert report.aniso_frob_mae == pytest.approx(np.sqrt(2.0))

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            metrics([np.eye(3)], [np.eye(3), np.eye(3)])

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            metrics([], [])

    def test_pythagorean_decomposition(self):
        preds, targets = random_pairs(100, seed=1)
        for p, t in zip(preds, targets):
            r = metrics([p], [t])
            lhs = r.frob_mae**2
            rhs = 3.0 * r.iso_mae**2 + r.aniso_frob_mae**2
            assert abs(lhs - rhs) < 1e-10

    def test_rotation_invariance(self):
        preds, targets = random_pairs(20, seed=2)
        base = metrics(preds, targets)
        rng = np.random.default_rng(3)
        for r in ta.sample_rotations(5, rng):
            rot = metrics(
                [ta.conjugate(r, p) for p in preds],
                [ta.conjugate(r, t) for t in targets],
            )
            assert abs(rot.frob_mae - base.frob_mae) < 1e-10
            assert abs(rot.iso_mae - base.iso_mae) < 1e-10
            assert abs(rot.aniso_frob_mae - base.aniso_frob_mae) < 1e-10

    def test_vectorized_matches_naive_loop(self):
        preds, targets = random_pairs(100, seed=4)
        fast = metrics(preds, targets)
        slow = naive_metrics(preds, targets)
        assert abs(fast.frob_mae - slow.frob_mae) < 1e-12
        assert abs(fast.iso_mae - slow.iso_mae) < 1e-12
        assert abs(fast.aniso_frob_mae - slow.aniso_frob_mae) < 1e-12

    def test_residuals_kept_on_request(self):
        preds, targets = random_pairs(7)
        report = metrics(preds, targets, keep_residuals=True)
        assert len(report.residual_frob) == 7
        assert np.mean(report.residual_frob) == pytest.approx(report.frob_mae)

    def test_save_load(self, tmp_path):
        preds, targets = random_pairs(3)
        report = metrics(preds, targets)
        report.save(tmp_path / "m.json")
        loaded = MetricReport.load(tmp_path / "m.json")
        assert loaded == report


class TestEquivTest:
    def molecules(self, n=5, seed=0):
        return [r.to_molecule() for r in
                synthetic_generator(n, seed=seed, min_atoms=3, max_atoms=5)]

    def test_exactly_equivariant_model(self):
        report = equiv_test(TeacherModel(), self.molecules(), n_rot=6, seed=1)
        assert report.eps_equiv < 1e-12
        # teacher predictions equal the stored targets, so eps_target ~ 0 too
        assert report.eps_target < 1e-12
        assert report.n_rotations == 6
        assert report.n_samples == 5

    def test_float32_model_is_equivariant_to_tolerance(self):
        cfg = ModelConfig(c_s=16, c_v=6, c_t=5, n_layers=2, cutoff=5.0,
                          n_rbf=8, hidden=24, lora_rank=3)
        model = Model.init(cfg, seed=0)
        report = equiv_test(model, self.molecules(), n_rot=8, seed=2)
        assert report.eps_equiv < 1e-4

    def test_identity_rotations_give_zero(self):
        cfg = ModelConfig(c_s=8, c_v=4, c_t=3, n_layers=1, cutoff=5.0,
                          n_rbf=4, hidden=8, lora_rank=2)
        model = Model.init(cfg, seed=0)
        report = equiv_test(model, self.molecules(2), n_rot=1, identity_rotations=True)
        assert report.eps_equiv == 0.0

    def test_deterministic_for_seed(self):
        model = TeacherModel()
        mols = self.molecules()
        a = equiv_test(model, mols, n_rot=4, seed=7)
        b = equiv_test(model, mols, n_rot=4, seed=7)
        assert a == b

    def test_eps_target_none_without_targets(self):
        mols = self.molecules(2)
        for m in mols:
            m.target_alpha = None
        report = equiv_test(TeacherModel(), mols, n_rot=2, seed=0)
        assert report.eps_target is None
        assert report.eps_equiv < 1e-12

    def test_save_load(self, tmp_path):
        report = equiv_test(TeacherModel(), self.molecules(2), n_rot=2, seed=0)
        report.save(tmp_path / "e.json")
        assert EquivReport.load(tmp_path / "e.json") == report


class TestSizeBinned:
    def test_perfect_predictions_zero_medians(self):
        preds, _ = random_pairs(6)
        report = relative_deviatoric_report(preds, preds, [3, 3, 4, 4, 5, 5])
        assert set(report.medians) == {3, 4, 5}
        assert all(v == 0.0 for v in report.medians.values())
        assert report.counts == {3: 2, 4: 2, 5: 2}

    def test_eps_dominated_isotropic_target(self):
        # dev(target) = 0: the ratio is ||dev(pred)||_F / eps
        target = 2.0 * np.eye(3)
        pred = target + np.diag([-1.0, 0.0, 1.0]) / np.sqrt(2.0)  # unit dev norm
        report = relative_deviatoric_report([pred], [target], [3], eps=1e-8)
        assert report.medians[3] == pytest.approx(1e8, rel=1e-9)

    def test_median_per_bin(self):
        dev_dir = np.diag([-1.0, 0.0, 1.0]) / np.sqrt(2.0)
        target = dev_dir  # ||dev(target)||_F = 1
        preds = [target + r * dev_dir for r in (0.1, 0.3, 0.2)]
        report = relative_deviatoric_report(preds, [target] * 3, [4, 4, 4])
        assert report.medians[4] == pytest.approx(0.2, rel=1e-6)
        assert report.counts[4] == 3

    def test_counts_sum_to_samples(self):
        preds, targets = random_pairs(17)
        counts = [3 + (i % 5) for i in range(17)]
        report = relative_deviatoric_report(preds, targets, counts)
        assert sum(report.counts.values()) == 17
        assert report.n_samples == 17

    def test_length_mismatch(self):
        preds, targets = random_pairs(3)
        with pytest.raises(LengthMismatch):
            relative_deviatoric_report(preds, targets, [3, 3])

    def test_bad_eps(self):
        preds, targets = random_pairs(2)
        with pytest.raises(ValueError):
            relative_deviatoric_report(preds, targets, [3, 3], eps=0.0)

    def test_save_load_and_table(self, tmp_path):
        preds, targets = random_pairs(8)
        report = relative_deviatoric_report(preds, targets, [3, 3, 4, 5, 5, 5, 7, 9])
        report.save(tmp_path / "b.json")
        loaded = SizeBinnedReport.load(tmp_path / "b.json")
        assert loaded == report
        report.save_table(tmp_path / "b.tsv")
        lines = (tmp_path / "b.tsv").read_text().splitlines()
        assert lines[0] == "heavy_atoms\tmedian_rel_dev_err\tcount"
        assert len(lines) == 1 + len(report.medians)
        bins = [int(l.split("\t")[0]) for l in lines[1:]]
        assert bins == sorted(bins)


class TestParamCount:
    def test_linear_head_with_bias(self):
        shapes = [("head.w", (10, 5), "w"), ("head.b", (5,), "b")]
        assert count_parameters(shapes) == 55

    def test_matches_initialized_model(self):
        cfg = ModelConfig(c_s=16, c_v=6, c_t=5, n_layers=2, hidden=24, lora_rank=3)
        assert param_count(cfg) == Model.init(cfg).n_parameters()

    def test_monotone_in_tensor_channels(self):
        small = ModelConfig(c_s=16, c_v=6, c_t=4, n_layers=2, hidden=24, lora_rank=2)
        doubled = ModelConfig(c_s=16, c_v=6, c_t=8, n_layers=2, hidden=24, lora_rank=2)
        assert param_count(doubled) > param_count(small)

    def test_all_branches_add_parameters(self):
        base = ModelConfig(c_s=16, c_v=6, c_t=4, n_layers=2, hidden=24, lora_rank=2)
        more = ModelConfig(c_s=16, c_v=6, c_t=4, n_layers=2, hidden=24, lora_rank=2,
                           branch_rr=True, branch_rv=True)
        assert param_count(more) > param_count(base)

import numpy as np
import pytest

from dlhim.containers import read_container, write_container
from dlhim.errors import CheckpointError, NonFiniteError
from dlhim.neural_correction import (DeepOnetOperator, OperatorKind, SpectralOperator, ZeroCorrection,
                                     apply_and_grad, checkpoint_load, checkpoint_save, deeponet_apply,
                                     exact_inverse_operator, spectral_apply)
from dlhim.pde_problems import Grid1D, ProblemInstance, ProblemKind, generate_instances
from dlhim.smoothers import SmootherConfig
from dlhim.training import Basis, Framework, NormKind, NormSpec, Objective
from tests.conftest import unit_diffusion

SMALL_DEEPONET = {"branch": [62, 12, 12], "trunk": [1, 12, 12]}


def small_deeponet(seed=0):
    return DeepOnetOperator.create(seed, **SMALL_DEEPONET)


@pytest.fixture
def batch():
    return generate_instances(ProblemKind.DIFFUSION, Grid1D(31), 2, master_seed=17)


class TestDeepOnet:
    def test_zero_residual_gives_zero(self, diffusion_instance):
        op = small_deeponet()
        out = op.correct(np.zeros(31), diffusion_instance.system)
        np.testing.assert_array_equal(out, np.zeros(31))

    def test_positive_homogeneity(self, diffusion_instance, rng):
        op = small_deeponet()
        r = rng.standard_normal(31)
        k = diffusion_instance.system.coefficient
        one = deeponet_apply(op, r, k, Grid1D(31))
        two = deeponet_apply(op, 2.0 * r, k, Grid1D(31))
        np.testing.assert_allclose(two, 2.0 * one, rtol=1e-12, atol=1e-14)

    def test_query_resolution_consistency(self, diffusion_instance, rng):
        op = small_deeponet(3)
        r = rng.standard_normal(31)
        k = diffusion_instance.system.coefficient
        coarse = deeponet_apply(op, r, k, Grid1D(31))
        fine = deeponet_apply(op, r, k, Grid1D(127))
        np.testing.assert_allclose(fine[3::4], coarse, rtol=1e-12, atol=1e-14)

    def test_query_outside_unit_interval(self, rng):
        op = small_deeponet()
        with pytest.raises(ValueError):
            deeponet_apply(op, rng.standard_normal(31), None, np.array([0.5, 1.2]))

    def test_larger_grid_input_is_restricted(self):
        op = small_deeponet()
        system = unit_diffusion(63, np.ones(63))
        assert op.correct(system.rhs, system).shape == (63,)

    def test_branch_width_must_match_train_grid(self):
        with pytest.raises(ValueError):
            DeepOnetOperator.create(0, branch=[30, 8], trunk=[1, 8])

    def test_wrong_parameter_count(self):
        op = small_deeponet()
        with pytest.raises(ValueError):
            DeepOnetOperator(np.zeros(op.n_params + 1), op.arch)

    def test_set_params_clears_trunk_cache(self, diffusion_instance, rng):
        op = small_deeponet()
        r = rng.standard_normal(31)
        before = op.correct(r, diffusion_instance.system)
        op.set_params(op.params * 1.5)
        after = op.correct(r, diffusion_instance.system)
        fresh = DeepOnetOperator(op.params, op.arch).correct(r, diffusion_instance.system)
        np.testing.assert_array_equal(after, fresh)
        assert not np.array_equal(before, after)


class TestSpectral:
    def test_unit_multipliers_are_identity(self, diffusion_instance, rng):
        op = SpectralOperator.with_multipliers(np.ones(31))
        r = rng.standard_normal(31)
        out = spectral_apply(op, r, diffusion_instance.system.coefficient)
        np.testing.assert_allclose(out, r, atol=1e-12)

    def test_linear_in_residual(self, diffusion_instance, rng):
        op = SpectralOperator.create(seed=4)
        k = diffusion_instance.system.coefficient
        r1, r2 = rng.standard_normal(31), rng.standard_normal(31)
        lhs = spectral_apply(op, r1 + r2, k)
        rhs = spectral_apply(op, r1, k) + spectral_apply(op, r2, k)
        np.testing.assert_allclose(lhs, rhs, atol=1e-12 * np.abs(lhs).max())

    @pytest.mark.parametrize("n", [31, 63])
    def test_exact_inverse_oracle(self, n, rng):
        system = unit_diffusion(n)
        e = rng.standard_normal(n)
        out = spectral_apply(exact_inverse_operator(Grid1D(n)), system.matvec(e), None)
        np.testing.assert_allclose(out, e, atol=1e-8)

    def test_multipliers_follow_mode_prior_at_init(self):
        op = SpectralOperator.create(seed=0)
        m = op.multipliers(None)
        assert m.shape == (31,)
        assert np.all(np.abs(m.real) < 1.0)

    def test_fewer_nodes_than_modes(self, rng):
        op = SpectralOperator.create(seed=0)
        assert spectral_apply(op, rng.standard_normal(15), None).shape == (15,)

    def test_kind_checks(self, rng):
        with pytest.raises(ValueError):
            spectral_apply(small_deeponet(), rng.standard_normal(31), None)
        with pytest.raises(ValueError):
            deeponet_apply(SpectralOperator.create(0), rng.standard_normal(31), None, Grid1D(31))


OBJECTIVES = [
    Objective(basis, framework, NormSpec(norm), unroll=2 if framework == Framework.DYNAMIC else 1)
    for basis in Basis for framework in Framework for norm in NormKind
]


@pytest.mark.parametrize("objective", OBJECTIVES, ids=lambda o: o.label)
@pytest.mark.parametrize("make_op", [small_deeponet, lambda: SpectralOperator.create(5, hidden=8)],
                         ids=["deeponet", "spectral"])
def test_gradient_matches_central_differences(objective, make_op, batch):
    op = make_op()
    spec = objective.bind(SmootherConfig(sweeps=3))
    result = apply_and_grad(op, batch, spec)
    rng = np.random.default_rng(99)
    theta = op.params.copy()
    eps = 1e-6

    for _ in range(20):
        d = rng.standard_normal(op.n_params)
        d /= np.linalg.norm(d)
        op.set_params(theta + eps * d)
        up = apply_and_grad(op, batch, spec).loss_value
        op.set_params(theta - eps * d)
        down = apply_and_grad(op, batch, spec).loss_value
        fd = (up - down) / (2 * eps)
        assert abs(result.grad @ d - fd) <= 1e-4 * (abs(fd) + 1e-6)
    op.set_params(theta)


class TestApplyAndGrad:
    def test_zero_multipliers_give_unit_residual_loss(self, batch):
        op = SpectralOperator.with_multipliers(np.zeros(31))
        result = apply_and_grad(op, batch, Objective(Basis.RESIDUAL).bind())
        assert result.loss_value == 1.0
        assert result.instances == 2

    def test_duplicated_instance_doubles_summed_gradient(self, batch):
        op = small_deeponet()
        spec = Objective(Basis.ERROR).bind()
        single = apply_and_grad(op, batch[:1], spec, reduction="sum")
        double = apply_and_grad(op, [batch[0], batch[0]], spec, reduction="sum")
        np.testing.assert_array_equal(double.grad, 2.0 * single.grad)

    def test_tape_bytes_sum_over_instances(self, batch):
        op = small_deeponet()
        spec = Objective(Basis.ERROR).bind()
        single = apply_and_grad(op, batch[:1], spec)
        double = apply_and_grad(op, [batch[0], batch[0]], spec)
        assert double.tape_bytes == 2 * single.tape_bytes > 0

    def test_non_finite_loss_names_batch_index(self, batch):
        system = batch[0].system
        bad = ProblemInstance(system.with_rhs(np.full(system.n, np.nan)), batch[0].solution)
        op = SpectralOperator.create(0, hidden=8)
        with pytest.raises(NonFiniteError) as info:
            apply_and_grad(op, [batch[0], bad], Objective(Basis.RESIDUAL).bind())
        assert info.value.batch_index == 1

    def test_degenerate_instance_is_skipped(self, batch):
        system = batch[0].system
        flat = ProblemInstance(system.with_rhs(np.zeros(system.n)), np.zeros(system.n))
        result = apply_and_grad(small_deeponet(), [flat, batch[1]], Objective(Basis.RESIDUAL).bind())
        assert result.instances == 1

    def test_unknown_reduction(self, batch):
        with pytest.raises(ValueError):
            apply_and_grad(ZeroCorrection(), batch, Objective().bind(), reduction="max")


class TestCheckpoints:
    @pytest.mark.parametrize("make_op", [small_deeponet, lambda: SpectralOperator.create(2), ZeroCorrection])
    def test_round_trip_is_byte_identical(self, tmp_path, make_op):
        op = make_op()
        first, second = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        checkpoint_save(op, str(first))
        loaded = checkpoint_load(str(first))
        checkpoint_save(loaded, str(second))
        assert first.read_bytes() == second.read_bytes()
        assert loaded.kind == op.kind
        np.testing.assert_array_equal(loaded.params, op.params)

    def test_loaded_operator_reproduces_outputs(self, tmp_path, diffusion_instance, rng):
        op = small_deeponet(8)
        path = str(tmp_path / "op.ckpt")
        checkpoint_save(op, path)
        r = rng.standard_normal(31)
        np.testing.assert_array_equal(checkpoint_load(path).correct(r, diffusion_instance.system),
                                      op.correct(r, diffusion_instance.system))

    def test_truncated_checkpoint(self, tmp_path):
        path = tmp_path / "op.ckpt"
        checkpoint_save(small_deeponet(), str(path))
        data = path.read_bytes()
        path.write_bytes(data[:-16])
        with pytest.raises(CheckpointError):
            checkpoint_load(str(path))

    def test_version_mismatch(self, tmp_path):
        path = str(tmp_path / "op.ckpt")
        write_container(path, {"format_version": "0", "kind": "zero", "arch": {},
                               "normalize_input": False}, {"params": np.zeros(0)})
        with pytest.raises(CheckpointError, match="version"):
            checkpoint_load(path)

    def test_container_header_lists_payloads(self, tmp_path):
        path = str(tmp_path / "op.ckpt")
        op = SpectralOperator.create(1)
        checkpoint_save(op, path)
        header, payloads = read_container(path)
        assert header["payloads"] == [["params", op.n_params]]
        assert header["kind"] == OperatorKind.SPECTRAL.value

    def test_describe(self):
        info = small_deeponet().describe()
        assert info["kind"] == "deeponet"
        assert info["n_params"] == small_deeponet().n_params


def test_zero_correction_has_no_parameters():
    op = ZeroCorrection()
    assert op.n_params == 0
    np.testing.assert_array_equal(op.correct(np.ones(7), unit_diffusion(7)), np.zeros(7))


import math

import numpy as np
import pytest

from otflow import autodiff as ad
from otflow import models
from otflow.errors import NonFinite, ShapeMismatch
from otflow.grids import ImageGrid
from otflow.models import ArchitectureConfig, Trajectory, decode, encode, init_params, integrate


def tiny_arch(**kw):
    defaults = dict(image_height=8, image_width=8, latent_dim=4,
                    encoder_widths=(16,), decoder_widths=(16,), field_widths=(8,))
    defaults.update(kw)
    return ArchitectureConfig(**defaults)


def rotation_params(dtype=np.float64):
    """Hand-built linear field z' = Az with A = [[0,-1],[1,0]] (no hidden layers)."""
    arch = ArchitectureConfig(image_height=2, image_width=1, latent_dim=2,
                              encoder_widths=(), decoder_widths=(), field_widths=())
    params = init_params(arch, seed=0, dtype=dtype)
    params["field.0.w"].values = np.array([[0.0, 1.0], [-1.0, 0.0]], dtype=dtype)
    params["field.0.b"].values = np.zeros(2, dtype=dtype)
    return arch, params


def test_zero_field_gives_constant_trajectory():
    arch = tiny_arch()
    params = init_params(arch, seed=3)
    z0 = np.random.default_rng(0).normal(size=(1, 4)).astype(np.float32)
    traj = integrate(z0, [0.0, 1.0, 2.5], params, substep=0.1)
    for code in traj.codes:
        np.testing.assert_array_equal(code.values, z0)


def test_rotation_field_oracle():
    # dz/dt = Az with A a quarter-turn generator: z(pi/2) from (1,0) is (0,1)
    _, params = rotation_params()
    z0 = np.array([[1.0, 0.0]])
    traj = integrate(z0, [0.0, math.pi / 2.0], params, substep=0.05)
    final = traj.codes[-1].values[0]
    assert np.abs(final - np.array([0.0, 1.0])).max() < 1e-5


def test_rk4_convergence_order():
    _, params = rotation_params()
    z0 = np.array([[1.0, 0.0]])
    target = np.array([0.0, 1.0])

    def err(h):
        traj = integrate(z0, [0.0, math.pi / 2.0], params, substep=h)
        return np.linalg.norm(traj.codes[-1].values[0] - target)

    ratio = err(0.1) / err(0.05)
    assert 8.0 <= ratio <= 32.0, f"order ratio {ratio}"


def test_integrate_autonomy():
    arch = tiny_arch()
    params = init_params(arch, seed=11)
    # give the field nonzero output weights (it is zero-initialized)
    rng = np.random.default_rng(4)
    last = max(int(n.split(".")[1]) for n in params if n.startswith("field.") and n.endswith(".w"))
    params[f"field.{last}.w"].values = (0.3 * rng.normal(size=params[f"field.{last}.w"].shape)).astype(np.float32)
    z0 = rng.normal(size=(2, 4)).astype(np.float32)

    one_shot = integrate(z0, [0.0, 3.0], params, substep=0.1).codes[-1].values
    part1 = integrate(z0, [0.0, 1.0], params, substep=0.1).codes[-1].values
    part2 = integrate(part1, [0.0, 2.0], params, substep=0.1).codes[-1].values
    assert np.abs(one_shot - part2).max() < 1e-6


def test_integrate_rejects_bad_times():
    arch = tiny_arch()
    params = init_params(arch, seed=0)
    with pytest.raises(ValueError):
        integrate(np.zeros((1, 4)), [0.0, 1.0, 1.0], params)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_integrate_flags_divergence():
    arch = ArchitectureConfig(image_height=2, image_width=1, latent_dim=2,
                              encoder_widths=(), decoder_widths=(), field_widths=())
    params = init_params(arch, seed=0, dtype=np.float64)
    params["field.0.w"].values = np.array([[40.0, 0.0], [0.0, 40.0]])  # exploding flow
    with pytest.raises(NonFinite):
        integrate(np.ones((1, 2)) * 10.0, [0.0, 200.0], params, substep=0.5)


def test_encode_deterministic_and_shape_checked():
    arch = tiny_arch()
    params = init_params(arch, seed=7)
    img = ImageGrid(np.random.default_rng(2).uniform(0.0, 1.0, size=(8, 8)))
    z1, z2 = encode(img, params, arch), encode(img, params, arch)
    np.testing.assert_array_equal(z1, z2)
    assert z1.shape == (4,)
    with pytest.raises(ShapeMismatch):
        encode(ImageGrid(np.ones((4, 4))), params, arch)


def test_encode_zero_image_through_zero_final_layer():
    arch = tiny_arch()
    params = init_params(arch, seed=7)
    last = max(int(n.split(".")[1]) for n in params if n.startswith("enc.") and n.endswith(".w"))
    params[f"enc.{last}.w"].values = np.zeros_like(params[f"enc.{last}.w"].values)
    params[f"enc.{last}.b"].values = np.zeros_like(params[f"enc.{last}.b"].values)
    z = encode(ImageGrid(np.zeros((8, 8))), params, arch)
    np.testing.assert_array_equal(z, np.zeros(4))


def test_encoder_lipschitz_bound():
    # tanh layers are 1-Lipschitz, so the code change is bounded by the
    # product of the weight spectral norms times the input change
    arch = tiny_arch()
    params = init_params(arch, seed=9)
    rng = np.random.default_rng(1)
    base = rng.uniform(0.1, 1.0, size=(8, 8))
    img_a = ImageGrid(base)
    img_b = ImageGrid(base + 1e-6)
    za, zb = encode(img_a, params, arch), encode(img_b, params, arch)
    norms = [np.linalg.norm(params[n].values.astype(np.float64), 2)
             for n in params if n.startswith("enc.") and n.endswith(".w")]
    bound = float(np.prod(norms)) * 1e-6 * arch.image_size
    assert np.linalg.norm(za - zb) <= bound


def test_decode_positive_and_uniform_at_zero():
    arch = tiny_arch()
    params = init_params(arch, seed=5)
    rng = np.random.default_rng(3)
    for _ in range(5):
        img = decode(rng.normal(size=4).astype(np.float32), params, arch)
        assert img.values.min() > 0.0
    # zero final pre-activation -> softplus(0) = ln 2 everywhere
    last = max(int(n.split(".")[1]) for n in params if n.startswith("dec.") and n.endswith(".w"))
    params[f"dec.{last}.w"].values = np.zeros_like(params[f"dec.{last}.w"].values)
    params[f"dec.{last}.b"].values = np.zeros_like(params[f"dec.{last}.b"].values)
    img = decode(np.zeros(4, dtype=np.float32), params, arch)
    np.testing.assert_allclose(img.values, math.log(2.0), rtol=1e-6)


def test_relu_decoder_output_option():
    arch = tiny_arch(decoder_output="relu")
    params = init_params(arch, seed=5)
    img = decode(np.zeros(4, dtype=np.float32), params, arch)
    assert img.values.min() >= 0.0


def test_field_zero_initialized_output_layer():
    arch = tiny_arch()
    params = init_params(arch, seed=123)
    last = max(int(n.split(".")[1]) for n in params if n.startswith("field.") and n.endswith(".w"))
    assert np.all(params[f"field.{last}.w"].values == 0.0)
    assert np.all(params[f"field.{last}.b"].values == 0.0)


def test_init_deterministic():
    arch = tiny_arch()
    p1, p2 = init_params(arch, seed=42), init_params(arch, seed=42)
    assert list(p1.keys()) == list(p2.keys())
    for name in p1:
        np.testing.assert_array_equal(p1[name].values, p2[name].values)


def test_gradients_flow_through_integrator():
    _, params = rotation_params()
    for p in params.values():
        p.requires_grad = True
    z0 = ad.constant(np.array([[1.0, 0.0]]), dtype=np.float64)
    with ad.Tape() as tape:
        traj = integrate(z0, [0.0, 1.0], params, substep=0.25)
        loss = ad.tsum(ad.square(traj.codes[-1]))
        ad.backward(tape, loss)
    assert params["field.0.w"].grad is not None
    assert np.abs(params["field.0.w"].grad).max() > 0.0

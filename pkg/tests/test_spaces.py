import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vmsflow.checks import divergence_compatibility
from vmsflow.diagnostics import point_values
from vmsflow.errors import ConfigError, DataError, InputError
from vmsflow.exact import CAVITY
from vmsflow.quadrature import gauss_rule, metric
from vmsflow.spaces import (FREE_SLIP, NO_SLIP, PERIODIC, PRESCRIBED, BoundarySpec, Mesh, build_space,
                            pressure_mean_constraint, remove_pressure_means, solenoidal_lifting)


def test_periodic_dof_counts():
    space = build_space(Mesh.uniform(2, 4), 1, BoundarySpec.periodic(2))
    assert [space.layout.sizes[n] for n in ("u0", "u1", "p", "pp")] == [16, 16, 16, 16]
    assert [kv.degree for kv in space.kvs("u0")] == [2, 1]
    assert [kv.degree for kv in space.kvs("u1")] == [1, 2]


@pytest.mark.parametrize("k_prime", [1, 2])
def test_clamped_dof_counts(k_prime):
    space = build_space(Mesh.uniform(2, 2), k_prime, BoundarySpec.uniform(2, NO_SLIP))
    assert space.layout.shapes["u0"] == (2 + k_prime + 1, 2 + k_prime)
    assert space.layout.shapes["p"] == (2 + k_prime, 2 + k_prime)


def test_fine_pressure_refinement_layout():
    space = build_space(Mesh.uniform(2, 3), 1, BoundarySpec.uniform(2, NO_SLIP), fine_pressure_refinement=1)
    assert space.layout.shapes["pp"] == (7, 7)
    assert build_space(Mesh.uniform(2, 3), 1, BoundarySpec.uniform(2, NO_SLIP)).layout.shapes["pp"] == (4, 4)


def test_dof_map_is_bijective():
    space = build_space(Mesh.uniform(2, 3), 2, BoundarySpec.uniform(2, NO_SLIP))
    seen = set()
    for g in range(space.size):
        name, multi = space.tensor_index(g)
        assert space.dof(name, multi) == g
        seen.add(g)
    assert len(seen) == space.size


def test_unpaired_periodic_face_rejected():
    faces = {(0, 0): PERIODIC, (0, 1): NO_SLIP, (1, 0): NO_SLIP, (1, 1): NO_SLIP}
    with pytest.raises(ConfigError):
        build_space(Mesh.uniform(2, 3), 1, BoundarySpec(faces))


def test_bad_k_prime_rejected():
    with pytest.raises(InputError):
        build_space(Mesh.uniform(2, 3), 3, BoundarySpec.periodic(2))


@pytest.mark.parametrize("k_prime,bc", [(1, NO_SLIP), (2, NO_SLIP), (1, PERIODIC), (2, FREE_SLIP)])
def test_divergence_lies_in_pressure_space(k_prime, bc):
    space = build_space(Mesh.uniform(2, 4), k_prime, BoundarySpec.uniform(2, bc))
    assert divergence_compatibility(space, np.random.default_rng(3), 20) <= 1e-10


def test_metric_examples():
    assert metric(Mesh.uniform(2, 4)).contraction == pytest.approx(512.0)
    assert metric(Mesh.uniform(3, 16, (0, np.pi))).trace == pytest.approx(3 * (16 / np.pi) ** 2)


@pytest.mark.parametrize("n", [1, 2, 4])
def test_gauss_rule_exact_to_degree(n):
    r = gauss_rule(n, (0.0, 2.0))
    for k in range(2 * n):
        assert r.weights @ r.points ** k == pytest.approx(2.0 ** (k + 1) / (k + 1), rel=1e-13)


def test_mean_constraint():
    space = build_space(Mesh.uniform(2, 4, (0.0, 2 * np.pi)), 1, BoundarySpec.periodic(2))
    m = pressure_mean_constraint(space)
    blk = space.layout.block("p")
    assert m(np.full(blk.stop - blk.start, 3.0)) == pytest.approx(3.0 * space.mesh.volume)
    x = np.random.default_rng(0).standard_normal(space.size)
    y = remove_pressure_means(space, x)
    assert abs(m(y[blk])) <= 1e-12 * space.mesh.volume
    assert abs(pressure_mean_constraint(space, "pp")(y[space.layout.block("pp")])) <= 1e-12 * space.mesh.volume


def test_zero_boundary_data_lifts_to_zero():
    space = build_space(Mesh.uniform(2, 4), 1, BoundarySpec.uniform(2, NO_SLIP))
    assert np.all(solenoidal_lifting(space) == 0)


@pytest.mark.parametrize("k_prime", [1, 2])
def test_cavity_lifting_is_divergence_free(k_prime):
    space = build_space(Mesh.uniform(2, 6), k_prime, BoundarySpec.uniform(2, PRESCRIBED, CAVITY.velocity))
    lift = solenoidal_lifting(space)
    _, g, _ = space.interpolate_velocity(lift)
    assert np.max(np.abs(np.einsum("...ii->...", g))) <= 1e-9


def test_lifting_reproduces_discrete_solenoidal_field():
    space = build_space(Mesh.uniform(2, 5), 2, BoundarySpec.uniform(2, PRESCRIBED, CAVITY.velocity))
    lift = solenoidal_lifting(space)
    # boundary data taken from the discrete field itself
    again = solenoidal_lifting(space, lambda pts: point_values(space, lift, pts))
    assert np.max(np.abs(again - lift)) <= 1e-10


def test_net_flux_rejected():
    def source_flow(x):
        return np.stack([x[..., 0], np.zeros_like(x[..., 0])], -1)

    space = build_space(Mesh.uniform(2, 3), 1, BoundarySpec.uniform(2, PRESCRIBED, source_flow))
    with pytest.raises(DataError):
        solenoidal_lifting(space)


@settings(max_examples=10, deadline=None)
@given(n=st.integers(2, 5), k_prime=st.sampled_from([1, 2]))
def test_constrained_and_free_partition(n, k_prime):
    space = build_space(Mesh.uniform(2, n), k_prime, BoundarySpec.uniform(2, NO_SLIP))
    c, f = set(space.constrained.tolist()), set(space.free.tolist())
    assert not c & f
    assert len(c | f) == space.size

import math

import numpy as np
import pytest

from navaug.env_synth import (MAX_EDGE_M, N_VIEWS, EdgeProbabilityProvider, EnvParams, FeatureStore,
                              generate_environment, generate_features, generate_suite, load_environment,
                              load_features, oracle_edge_probability, save_environment)
from navaug.nav_graph import is_connected


def test_deterministic(env20):
    again = generate_suite(20, 2024)
    for a, b in zip(env20, again):
        assert a.reference_graph == b.reference_graph
        assert a.reference_graph.edges == b.reference_graph.edges
        assert np.array_equal(a.grid.cells, b.grid.cells)
    other = generate_environment(1, env_id="x")
    assert other.reference_graph != generate_environment(2, env_id="x").reference_graph


def test_reference_graphs_are_valid(env20):
    for env in env20:
        g = env.reference_graph
        assert is_connected(g), env.id
        assert len(env.panos) >= 2
        for i, j in g.edges:
            assert g.edge_length(i, j) <= MAX_EDGE_M + 1e-12
        for p in env.panos:
            assert not env.grid.cells[env.grid.free_cell_of(p.position)]


def test_geodesic_matrix(env20):
    env = env20[0]
    geo, eu = env.geodesic_matrix, env.euclidean_matrix
    assert np.array_equal(geo, geo.T)
    assert np.all(np.diag(geo) == 0)
    off = ~np.eye(len(geo), dtype=bool)
    assert np.all(geo[off] >= eu[off] - 2 * env.grid.cell_size * math.sqrt(2))


def test_params_validation():
    with pytest.raises(ValueError):
        EnvParams(n_rooms=0)
    with pytest.raises(ValueError):
        EnvParams(cell_size=0)
    assert 2 * EnvParams().spacing <= MAX_EDGE_M
    with pytest.raises(ValueError):
        generate_environment(0, split="nope")


def test_single_room_zero_density():
    env = generate_environment(5, EnvParams(n_rooms=1, pano_density=0.0))
    assert len(env.panos) == 1 and is_connected(env.reference_graph)


class TestProvider:
    def test_symmetric_in_range(self, env20):
        env = env20[1]
        prov = oracle_edge_probability(env, 0.3, seed=4)
        assert np.array_equal(prov.matrix, prov.matrix.T)
        assert prov.matrix.min() >= 0 and prov.matrix.max() <= 1
        i, j = env.reference_graph.edges[0]
        assert prov.probability(i, j) == prov.probability(j, i)
        assert prov.probability(i, j) == max(prov.directed_probability(i, j), prov.directed_probability(j, i))

    def test_noise_free_values(self, env20):
        env = env20[2]
        prov = oracle_edge_probability(env, 0.0)
        es = env.reference_graph.edge_set()
        for a in env.pano_ids[:10]:
            for b in env.pano_ids[:10]:
                if a != b:
                    assert prov.probability(a, b) == (0.9 if (min(a, b), max(a, b)) in es else 0.1)

    def test_clipped_noise_mean(self, env20):
        # Monte-Carlo mean of clip(0.9 + N(0, 0.2), 0, 1) against the closed form
        env = env20[3]
        i, j = env.reference_graph.edges[0]
        ki, kj = env.pano_ids.index(i), env.pano_ids.index(j)
        vals = np.array([oracle_edge_probability(env, 0.2, seed=s).raw[ki, kj] for s in range(4000)])
        from scipy.stats import norm
        mu, sd = 0.9, 0.2
        a = (1 - mu) / sd
        expect = mu * norm.cdf(a) - sd * norm.pdf(a) + (1 - norm.cdf(a)) - (mu * norm.cdf(-mu / sd)
                                                                             - sd * norm.pdf(-mu / sd))
        assert abs(vals.mean() - expect) < 0.01
        assert vals.min() >= 0 and vals.max() <= 1

    def test_rejects_bad_matrix(self, env20):
        env = env20[0]
        n = len(env.panos)
        with pytest.raises(ValueError):
            EdgeProbabilityProvider(env, np.full((n, n), 1.5))
        with pytest.raises(ValueError):
            EdgeProbabilityProvider(env, np.zeros((n + 1, n + 1)))
        with pytest.raises(ValueError):
            oracle_edge_probability(env, -0.1)

    def test_bucket_grid(self, env20):
        env = env20[0]
        prov = oracle_edge_probability(env, 0.0)
        i = env.pano_ids[0]
        grid = prov.bucket_grid(i)
        assert grid.shape == (8, 16, 5)
        near = [p.id for p in env.panos if p.id != i and prov.bucket_of(i, p.id) is not None]
        assert grid.max() == max(prov.directed_probability(i, j) for j in near)


class TestFeatures:
    def test_shape_norm_determinism(self, env20):
        env = env20[0]
        f = generate_features(env, 3, 64)
        assert f.data.shape == (len(env.panos), N_VIEWS, 64)
        assert f.data.dtype == np.float32
        assert np.allclose(np.linalg.norm(f.data, axis=2), 1.0, atol=1e-5)
        assert f == generate_features(env, 3, 64)
        assert f != generate_features(env, 4, 64)
        with pytest.raises(ValueError):
            generate_features(env, 0, 4)

    def test_nearby_panos_look_alike(self, env20):
        near, far = [], []
        for env in env20[:5]:
            f = generate_features(env, 0, 128)
            pooled = np.array([f.pooled(p) for p in env.pano_ids])
            pooled /= np.linalg.norm(pooled, axis=1, keepdims=True)
            sim = pooled @ pooled.T
            d = env.euclidean_matrix
            iu = np.triu_indices(len(d), 1)
            near.extend(sim[iu][d[iu] < 2.0])
            far.extend(sim[iu][d[iu] > 8.0])
        assert np.mean(near) > np.mean(far)

    def test_store_validation(self):
        with pytest.raises(ValueError):
            FeatureStore([1, 2], np.zeros((2, 10, 8)))


def test_bundle_round_trip(env20, tmp_path):
    env = env20[4]
    f = generate_features(env, 2, 16)
    save_environment(env, tmp_path / "e", f)
    back = load_environment(tmp_path / "e")
    assert back.id == env.id and back.split == env.split and back.params == env.params
    assert back.reference_graph == env.reference_graph
    assert np.array_equal(back.grid.cells, env.grid.cells)
    assert load_features(tmp_path / "e", back) == f
    raw = (tmp_path / "e" / "features.bin").read_bytes()
    (tmp_path / "e" / "features.bin").write_bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(ValueError, match="magic"):
        load_features(tmp_path / "e", back)

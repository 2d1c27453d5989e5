"""Unit tests for the file formats."""

import math

import numpy as np
import pytest

from covcal.calmaps import MatrixMap, MlpMap, ScalarMap
from covcal.errors import InvalidInput, SchemaMismatch
from covcal.statmath import NeesSeries, build_density, pack_upper, tri_size
from covcal.traceio import (
    StateBlock,
    TraceFile,
    TrajectoryFile,
    default_blocks,
    interpolate_trajectory,
    read_model,
    read_trace,
    read_trajectory,
    vio_blocks,
    write_model,
    write_overlay,
    write_trace,
    write_trajectory,
)


def make_trace(rng, n=3, steps=25, blocks=None):
    return TraceFile(
        n=n, m=2, dt=0.1,
        blocks=tuple(blocks) if blocks else default_blocks(n),
        k=np.arange(1, steps + 1),
        t=0.1 * np.arange(1, steps + 1),
        x_true=rng.standard_normal((steps, n)),
        x_hat=rng.standard_normal((steps, n)),
        p_hat=np.abs(rng.standard_normal((steps, tri_size(n)))),
    )


def rotvec_to_matrix(v):
    """Rodrigues formula, independent of scipy."""
    theta = np.linalg.norm(v)
    if theta < 1e-12:
        return np.eye(3)
    k = v / theta
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + math.sin(theta) * kx + (1 - math.cos(theta)) * (kx @ kx)


class TestTraceRoundTrip:
    def test_object_roundtrip_exact(self, tmp_path):
        rng = np.random.default_rng(1)
        tf = make_trace(rng)
        path = tmp_path / "trace.csv"
        write_trace(path, tf)
        back = read_trace(path)
        assert back.n == tf.n and back.m == tf.m and back.dt == tf.dt
        np.testing.assert_array_equal(back.k, tf.k)
        np.testing.assert_array_equal(back.t, tf.t)
        np.testing.assert_array_equal(back.x_true, tf.x_true)
        np.testing.assert_array_equal(back.x_hat, tf.x_hat)
        np.testing.assert_array_equal(back.p_hat, tf.p_hat)
        assert back.blocks == tf.blocks

    def test_file_roundtrip_byte_identical(self, tmp_path):
        rng = np.random.default_rng(2)
        tf = make_trace(rng)
        p1 = tmp_path / "a.csv"
        p2 = tmp_path / "b.csv"
        write_trace(p1, tf)
        write_trace(p2, read_trace(p1))
        assert p1.read_bytes() == p2.read_bytes()

    def test_jsonl_input(self, tmp_path):
        import json

        rng = np.random.default_rng(3)
        tf = make_trace(rng, n=2, steps=4)
        lines = [json.dumps({
            "schema": "covcal-trace", "version": 1, "n": 2, "m": 2, "dt": 0.1,
            "blocks": [{"name": "state", "size": 2, "diff": "euclidean"}],
        })]
        for i in range(tf.steps):
            lines.append(json.dumps({
                "k": int(tf.k[i]), "t": float(tf.t[i]),
                "x_true": tf.x_true[i].tolist(),
                "x_hat": tf.x_hat[i].tolist(),
                "p_hat": tf.p_hat[i].tolist(),
            }))
        path = tmp_path / "trace.jsonl"
        path.write_text("\n".join(lines))
        back = read_trace(path)
        np.testing.assert_array_equal(back.x_true, tf.x_true)
        np.testing.assert_array_equal(back.p_hat, tf.p_hat)

    def test_schema_mismatch(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text('#{"schema":"other","version":1}\n1,2,3\n')
        with pytest.raises(SchemaMismatch):
            read_trace(path)

    def test_row_width_mismatch(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text(
            '#{"schema":"covcal-trace","version":1,"n":2,"m":1,"dt":0.1,'
            '"blocks":[{"name":"state","size":2,"diff":"euclidean"}]}\n'
            "1,0.1,1.0,2.0\n"
        )
        with pytest.raises(SchemaMismatch):
            read_trace(path)


class TestBlockErrors:
    def test_euclidean_default(self):
        rng = np.random.default_rng(4)
        tf = make_trace(rng)
        np.testing.assert_array_equal(tf.errors(), tf.x_true - tf.x_hat)

    def test_rotation_vector_block(self):
        # error = log(R_true R_est^-1) as a rotation vector, checked against
        # a hand-rolled Rodrigues oracle through the forward construction
        rng = np.random.default_rng(5)
        steps = 10
        err_vecs = 0.3 * rng.standard_normal((steps, 3))
        est_vecs = 0.5 * rng.standard_normal((steps, 3))
        from scipy.spatial.transform import Rotation

        true_vecs = np.array([
            Rotation.from_matrix(
                rotvec_to_matrix(err_vecs[i]) @ rotvec_to_matrix(est_vecs[i])
            ).as_rotvec()
            for i in range(steps)
        ])
        tf = TraceFile(
            n=3, m=1, dt=0.1,
            blocks=(StateBlock(name="rotation", size=3, diff="rotation-vector"),),
            k=np.arange(1, steps + 1), t=0.1 * np.arange(1, steps + 1),
            x_true=true_vecs, x_hat=est_vecs,
            p_hat=np.ones((steps, 6)),
        )
        np.testing.assert_allclose(tf.errors(), err_vecs, atol=1e-12)

    def test_vio_blocks_layout(self):
        blocks = vio_blocks()
        assert sum(b.size for b in blocks) == 9
        assert blocks[1].diff == "rotation-vector"

    def test_rotation_block_size_enforced(self):
        with pytest.raises(InvalidInput):
            StateBlock(name="rot", size=4, diff="rotation-vector")


class TestTrajectory:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(6)
        traj = TrajectoryFile(
            t=np.arange(10.0),
            position=rng.standard_normal((10, 3)),
            rotation=0.1 * rng.standard_normal((10, 3)),
        )
        path = tmp_path / "traj.csv"
        write_trajectory(path, traj)
        back = read_trajectory(path)
        np.testing.assert_array_equal(back.t, traj.t)
        np.testing.assert_array_equal(back.position, traj.position)
        np.testing.assert_array_equal(back.rotation, traj.rotation)

    def test_linear_interpolation(self):
        traj = TrajectoryFile(
            t=np.array([0.0, 1.0, 2.0]),
            position=np.array([[0.0, 0.0, 0.0], [1.0, 2.0, 3.0], [2.0, 4.0, 6.0]]),
        )
        out = interpolate_trajectory(traj, [0.5, 1.5])
        np.testing.assert_allclose(out.position[0], [0.5, 1.0, 1.5])
        np.testing.assert_allclose(out.position[1], [1.5, 3.0, 4.5])

    def test_slerp_halfway(self):
        traj = TrajectoryFile(
            t=np.array([0.0, 1.0]),
            position=np.zeros((2, 3)),
            rotation=np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 1.0]]),
        )
        out = interpolate_trajectory(traj, [0.5])
        np.testing.assert_allclose(out.rotation[0], [0.0, 0.0, 0.5], atol=1e-12)

    def test_out_of_range_rejected(self):
        traj = TrajectoryFile(t=np.array([0.0, 1.0]), position=np.zeros((2, 3)))
        with pytest.raises(InvalidInput):
            interpolate_trajectory(traj, [1.5])


class TestModelFiles:
    def test_scalar_roundtrip(self, tmp_path):
        path = tmp_path / "m.cvcm"
        write_model(path, ScalarMap(s=2.5))
        back = read_model(path)
        assert isinstance(back, ScalarMap)
        assert back.s == 2.5

    def test_matrix_roundtrip(self, tmp_path):
        rng = np.random.default_rng(7)
        a = rng.standard_normal((4, 4))
        path = tmp_path / "m.cvcm"
        write_model(path, MatrixMap(a=a))
        back = read_model(path)
        np.testing.assert_array_equal(back.a, a)

    def test_mlp_roundtrip(self, tmp_path):
        from covcal.calmaps import _init_mlp

        rng = np.random.default_rng(8)
        mlp = _init_mlp(3, 3 + tri_size(3), (8, 4), True, 3, rng)
        path = tmp_path / "m.cvcm"
        write_model(path, mlp)
        back = read_model(path)
        assert isinstance(back, MlpMap)
        assert back.use_state and back.state_dim == 3
        for w1, w2 in zip(mlp.weights, back.weights):
            np.testing.assert_array_equal(w1, w2)
        for b1, b2 in zip(mlp.biases, back.biases):
            np.testing.assert_array_equal(b1, b2)

    def test_write_deterministic(self, tmp_path):
        rng = np.random.default_rng(9)
        a = rng.standard_normal((3, 3))
        p1, p2 = tmp_path / "a.cvcm", tmp_path / "b.cvcm"
        write_model(p1, MatrixMap(a=a))
        write_model(p2, MatrixMap(a=a.copy()))
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.cvcm"
        path.write_bytes(b"NOPE1234")
        with pytest.raises(SchemaMismatch):
            read_model(path)


class TestOverlay:
    def test_columns_and_normardization(self, tmp_path):
        rng = np.random.default_rng(10)
        density = build_density(NeesSeries(values=rng.chisquare(4, 2000), dof=4))
        path = tmp_path / "overlay.csv"
        write_overlay(path, density, 4)
        rows = [
            [float(v) for v in ln.split(",")]
            for ln in path.read_text().splitlines()
            if ln and not ln.startswith("#")
        ]
        arr = np.array(rows)
        assert arr.shape[1] == 4
        np.testing.assert_array_equal(arr[:, 0], density.centers)
        # empirical column integrates to one over the bins
        total = np.sum(arr[:, 1] * density.widths)
        assert total == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_allclose(arr[:, 3], np.abs(arr[:, 1] - arr[:, 2]),
                                   atol=1e-15)

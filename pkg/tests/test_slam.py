import numpy as np
import pytest

from vislam.errors import ConfigInvalid
from vislam.geometry import inverse, log, relative_pose
from vislam.pipeline import train_vocabulary
from vislam.sim import WorldConfig, simulate_keyframes
from vislam.slam import SlamBackend, SlamConfig

CFG = WorldConfig(loop_period=10, duration=25)


@pytest.fixture(scope="module")
def stream():
    return simulate_keyframes(CFG)


@pytest.fixture(scope="module")
def vocabulary(stream):
    return train_vocabulary(np.concatenate([r.descriptors for r in stream.records]))


@pytest.fixture(scope="module")
def backend(stream, vocabulary):
    b = SlamBackend(vocabulary)
    for r in stream.records:
        b.on_keyframe(r)
    return b


def test_first_and_second_keyframe(stream, vocabulary):
    b = SlamBackend(vocabulary)
    r0, r1 = stream.records[:2]
    g = b.on_keyframe(r0)
    assert len(b.graph.nodes) == 1 and not b.graph.edges
    assert np.allclose(g.matrix(), np.eye(4))
    b.on_keyframe(r1)
    assert len(b.graph.seq_edges) == 1
    e = b.graph.seq_edges[0]
    assert (e.k, e.k1) == (0, 1)
    assert np.allclose(e.measurement.matrix(), relative_pose(r1.pose, r0.pose).matrix())


def test_loops_closed_on_revisits(backend, stream):
    assert backend.loop_count > 0 and len(backend.graph.loop_edges) == backend.loop_count
    truth = dict(enumerate(p for _, p in stream.truth))
    for e in backend.graph.loop_edges:
        # each loop edge is non-adjacent and its verified pose agrees with the truth
        assert abs(backend.graph.nodes[e.k].seq - backend.graph.nodes[e.k1].seq) >= 2
        d = log(inverse(relative_pose(truth[e.k1], truth[e.k])) @ e.measurement)
        assert np.linalg.norm(d[:3]) < 0.05 and np.degrees(np.linalg.norm(d[3:])) < 1.0
    loops = [ev for ev in backend.events if ev["event"] == "loop"]
    assert abs(loops[0]["timestamp"] - loops[0]["match_timestamp"]) >= 0.5 * CFG.loop_period


def test_slam_beats_odometry(backend, stream):
    truth = np.array([p.t for _, p in stream.truth])
    odom = np.array([r.pose.t for r in stream.records])
    slam = np.array([backend.graph.nodes[i].pose.t for i in range(len(stream.records))])
    assert np.abs(slam - truth).max() < np.abs(odom - truth).max()


def test_graph_pose_equals_correction_times_odometry(backend, stream):
    last = len(stream.records) - 1
    n = backend.graph.nodes[last]
    assert np.allclose((backend.correction @ n.odom_pose).matrix(), n.pose.matrix(), atol=1e-12)


def test_loop_free_run_keeps_identity_correction(vocabulary):
    st = simulate_keyframes(WorldConfig(loop_period=30, duration=12))
    b = SlamBackend(vocabulary)
    for r in st.records:
        g = b.on_keyframe(r)
        assert np.allclose(g.matrix(), np.eye(4))
    assert b.loop_count == 0 and not b.optimized


def test_loop_keyframes_cost_more(backend):
    loop_ms = [ms for _, ms, ev in backend.timings if ev == "loop"]
    none_ms = [ms for _, ms, ev in backend.timings if ev == "none"]
    assert loop_ms and none_ms
    assert max(loop_ms) > np.median(none_ms)


def test_relocalization_merges_into_previous_map(backend, vocabulary):
    st = simulate_keyframes(CFG, start_time=10, end_time=20, anchor="origin", map_id=1, seed_offset=1)
    b = SlamBackend(vocabulary, prev_map=backend.graph)
    for r in st.records:
        b.on_keyframe(r)
    merges = [e for e in b.events if e["event"] == "merge"]
    assert b.merged and len(merges) == 1
    assert merges[0]["latency_keyframes"] <= 9 and merges[0]["matches"] >= 4
    assert set(b.graph.maps()) == {0, 1}
    assert b.graph.fixed == backend.graph.fixed
    assert b.hypotheses == []


def test_config_validation():
    with pytest.raises(ConfigInvalid):
        SlamConfig(min_score=1.5).validate()
    with pytest.raises(ConfigInvalid):
        SlamConfig(min_seq_gap=1).validate()

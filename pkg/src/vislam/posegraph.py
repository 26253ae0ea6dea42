"""Keyframe pose graph: relative-pose residuals, information weighting and
Levenberg-Marquardt optimization.

Every edge ``(a, b, M)`` stores the measured pose of node ``a`` in the frame
of node ``b`` (``M ~ T_b^-1 T_a``) and contributes the residual
``e = log(M^-1 T_b^-1 T_a)``. Sequential edges run from keyframe ``k`` to its
successor ``k+1``; loop edges from the query keyframe to its match.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from vislam.errors import AngleNearPi, FormatError, NotConnected, UnknownKeyframe
from vislam.geometry import (Pose, arrays_to_poses, batch_adjoint, batch_se3_exp, batch_se3_log,
                             batch_se3_right_jacobian_inv, compose, inverse, log, poses_to_arrays, relative_pose,
                             se3_right_jacobian_inv, adjoint)

logger = logging.getLogger(__name__)

SIGMA_T0 = 0.05
SIGMA_R0 = 0.01
OVERLAP_FLOOR = 0.1
LOOP_SIGMA_T = 0.02
LOOP_SIGMA_R = 0.005


@dataclass
class KeyframeNode:
    id: int
    pose: Pose
    landmark_ids: frozenset = frozenset()
    descriptors: np.ndarray | None = None
    timestamp: float = 0.0
    map_id: int = 0
    seq: int = 0                 # ordinal position within its map
    odom_pose: Pose | None = None
    record: object = None


@dataclass
class SeqEdge:
    k: int
    k1: int
    measurement: Pose
    information: np.ndarray


@dataclass
class LoopEdge:
    k: int
    k1: int                      # matched keyframe
    measurement: Pose
    information: np.ndarray
    inliers: int = 0


@dataclass
class OptimizeResult:
    cost: float
    initial_cost: float
    iterations: int
    history: list = field(default_factory=list)
    converged: bool = True


def info_from_overlap(overlap_ratio, sigma_t0=SIGMA_T0, sigma_r0=SIGMA_R0, floor=OVERLAP_FLOOR):
    """Isotropic information whose standard deviations grow as 1 / overlap (clipped)."""
    r = max(float(overlap_ratio), floor)
    st, sr = sigma_t0 / r, sigma_r0 / r
    return np.diag([st**-2] * 3 + [sr**-2] * 3)


def loop_information(sigma_t=LOOP_SIGMA_T, sigma_r=LOOP_SIGMA_R):
    return np.diag([sigma_t**-2] * 3 + [sigma_r**-2] * 3)


def edge_residual(measurement: Pose, pose_a: Pose, pose_b: Pose, jacobians=True):
    """``log(M^-1 T_b^-1 T_a)`` and its Jacobians w.r.t. right perturbations of a and b."""
    rel = relative_pose(pose_b, pose_a)
    e = log(relative_pose(measurement, rel))
    if not jacobians:
        return e
    Jri = se3_right_jacobian_inv(e)
    return e, Jri, -Jri @ adjoint(inverse(rel))


def residual_seq(edge: SeqEdge, poses):
    """Residual of a sequential edge given ``poses`` (id -> Pose)."""
    return edge_residual(edge.measurement, poses[edge.k], poses[edge.k1])


def residual_cls(edge: LoopEdge, poses):
    return edge_residual(edge.measurement, poses[edge.k], poses[edge.k1])


class PoseGraph:
    """Nodes, sequential chains (one per map) and the loop-closure set C."""

    def __init__(self):
        self.nodes = {}
        self.seq_edges = []
        self.loop_edges = []
        self.fixed = set()

    # -- construction ---------------------------------------------------------

    def add_node(self, node: KeyframeNode, fixed=None):
        if node.id in self.nodes:
            raise ValueError(f"node {node.id} already present")
        if node.odom_pose is None:
            node.odom_pose = node.pose
        self.nodes[node.id] = node
        if fixed or (fixed is None and not self.fixed):
            self.fixed.add(node.id)
        return node

    def add_seq_edge(self, k, k1, measurement: Pose, information):
        if k not in self.nodes or k1 not in self.nodes:
            raise UnknownKeyframe(f"sequential edge ({k}, {k1}) references a missing node")
        a, b = self.nodes[k], self.nodes[k1]
        if a.map_id != b.map_id or b.seq != a.seq + 1:
            raise ValueError(f"sequential edge ({k}, {k1}) does not join consecutive keyframes")
        e = SeqEdge(k, k1, measurement, np.asarray(information, float))
        self.seq_edges.append(e)
        return e

    def add_loop_edge(self, k, k1, measurement: Pose, information=None, inliers=0):
        if k not in self.nodes or k1 not in self.nodes:
            raise UnknownKeyframe(f"loop edge ({k}, {k1}) references a missing node")
        a, b = self.nodes[k], self.nodes[k1]
        if a.map_id == b.map_id and abs(a.seq - b.seq) < 2:
            raise ValueError(f"loop edge ({k}, {k1}) joins adjacent keyframes")
        info = loop_information() if information is None else np.asarray(information, float)
        e = LoopEdge(k, k1, measurement, info, int(inliers))
        self.loop_edges.append(e)
        return e

    def maps(self):
        return sorted({n.map_id for n in self.nodes.values()})

    def map_nodes(self, map_id):
        return sorted((n for n in self.nodes.values() if n.map_id == map_id), key=lambda n: n.seq)

    @property
    def edges(self):
        return list(self.seq_edges) + list(self.loop_edges)

    def poses(self):
        return {i: n.pose for i, n in self.nodes.items()}

    def check_connected(self):
        if not self.nodes:
            return
        if not self.fixed:
            raise NotConnected("pose graph has no fixed node")
        adj = {i: [] for i in self.nodes}
        for e in self.edges:
            adj[e.k].append(e.k1)
            adj[e.k1].append(e.k)
        seen = set(self.fixed)
        q = deque(self.fixed)
        while q:
            i = q.popleft()
            for j in adj[i]:
                if j not in seen:
                    seen.add(j)
                    q.append(j)
        if len(seen) != len(self.nodes):
            missing = sorted(set(self.nodes) - seen)[:5]
            raise NotConnected(f"nodes {missing} are not connected to the anchored graph")

    # -- objective --------------------------------------------------------------

    def _edge_arrays(self):
        edges = self.edges
        order = {i: n for n, i in enumerate(self.nodes)}
        a = np.array([order[e.k] for e in edges], dtype=int)
        b = np.array([order[e.k1] for e in edges], dtype=int)
        MR, Mt = poses_to_arrays([e.measurement for e in edges]) if edges else (np.zeros((0, 3, 3)), np.zeros((0, 3)))
        W = np.stack([e.information for e in edges]) if edges else np.zeros((0, 6, 6))
        return a, b, MR, Mt, W

    @staticmethod
    def _residuals(R, t, a, b, MR, Mt, jacobians=False):
        Rba = np.einsum("nji,njk->nik", R[b], R[a])
        tba = np.einsum("nji,nj->ni", R[b], t[a] - t[b])
        RE = np.einsum("nji,njk->nik", MR, Rba)
        tE = np.einsum("nji,nj->ni", MR, tba - Mt)
        e = batch_se3_log(RE, tE)
        if not jacobians:
            return e, None, None
        Jri = batch_se3_right_jacobian_inv(e)
        Rab = np.transpose(Rba, (0, 2, 1))
        tab = -np.einsum("nij,nj->ni", Rab, tba)
        Ja = Jri
        Jb = -Jri @ batch_adjoint(Rab, tab)
        return e, Ja, Jb

    def cost(self, poses=None):
        """Objective ``sum e^T W e`` over all edges at ``poses`` (default: current)."""
        if not self.edges:
            return 0.0
        if poses is None:
            poses = self.poses()
        R, t = poses_to_arrays([poses[i] for i in self.nodes])
        a, b, MR, Mt, W = self._edge_arrays()
        e, _, _ = self._residuals(R, t, a, b, MR, Mt)
        return float(np.einsum("ni,nij,nj->", e, W, e))

    def optimize(self, max_iters=100, lambda_init=1e-4, tol=1e-9, min_step=1e-10) -> OptimizeResult:
        """Levenberg-Marquardt with right-multiplicative updates; fixed nodes stay put."""
        self.check_connected()
        ids = list(self.nodes)
        if not self.edges:
            return OptimizeResult(0.0, 0.0, 0, [0.0])
        R, t = poses_to_arrays([self.nodes[i].pose for i in ids])
        a, b, MR, Mt, W = self._edge_arrays()
        free = np.array([i not in self.fixed for i in ids])
        col = np.full(len(ids), -1)
        col[free] = np.arange(free.sum())
        nf = int(free.sum())

        def objective(R_, t_):
            e_, _, _ = self._residuals(R_, t_, a, b, MR, Mt)
            return float(np.einsum("ni,nij,nj->", e_, W, e_))

        cost = objective(R, t)
        initial = cost
        history = [cost]
        lam = lambda_init
        it = 0
        converged = False
        if nf == 0 or cost < 1e-18:
            return OptimizeResult(cost, initial, 0, history, True)
        while it < max_iters:
            it += 1
            e, Ja, Jb = self._residuals(R, t, a, b, MR, Mt, jacobians=True)
            We = np.einsum("nij,nj->ni", W, e)
            g = np.zeros((len(ids), 6))
            np.add.at(g, a, np.einsum("nji,nj->ni", Ja, We))
            np.add.at(g, b, np.einsum("nji,nj->ni", Jb, We))
            rows, cols, vals = [], [], []
            for (ia, JA), (ib, JB) in (((a, Ja), (a, Ja)), ((a, Ja), (b, Jb)), ((b, Jb), (a, Ja)), ((b, Jb), (b, Jb))):
                Hblk = np.einsum("nki,nkl,nlj->nij", JA, W, JB)
                ok = free[ia] & free[ib]
                ci, cj = col[ia[ok]], col[ib[ok]]
                rr = (6 * ci[:, None, None] + np.arange(6)[None, :, None]) * np.ones((1, 1, 6), int)
                cc = (6 * cj[:, None, None] + np.arange(6)[None, None, :]) * np.ones((1, 6, 1), int)
                rows.append(rr.ravel())
                cols.append(cc.ravel())
                vals.append(Hblk[ok].ravel())
            H = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                              shape=(6 * nf, 6 * nf)).tocsc()
            gf = g[free].reshape(-1)
            diag = H.diagonal()
            improved = False
            while True:
                Hd = H + sp.diags(lam * np.maximum(diag, 1e-12), format="csc")
                try:
                    dx = spla.spsolve(Hd, -gf)
                except RuntimeError:
                    dx = np.full(6 * nf, np.nan)
                if not np.all(np.isfinite(dx)):
                    lam *= 10.0
                    if lam > 1e12:
                        break
                    continue
                d = np.zeros((len(ids), 6))
                d[free] = dx.reshape(nf, 6)
                dR, dt = batch_se3_exp(d)
                Rn = R @ dR
                tn = t + np.einsum("nij,nj->ni", R, dt)
                try:
                    cn = objective(Rn, tn)
                except AngleNearPi:
                    cn = np.inf
                if cn < cost:
                    improved = True
                    break
                lam *= 10.0
                if lam > 1e12:
                    break
            if not improved:
                converged = True
                break
            rel = (cost - cn) / max(cost, 1e-300)
            step = float(np.linalg.norm(dx))
            R, t, cost = Rn, tn, cn
            history.append(cost)
            lam = max(lam / 10.0, 1e-12)
            if rel < tol or step < min_step or cost < 1e-18:
                converged = True
                break
        for i, p in zip(ids, arrays_to_poses(R, t)):
            self.nodes[i].pose = p
        return OptimizeResult(cost, initial, it, history, converged)

    # -- correction ---------------------------------------------------------------

    def correction(self, kid, odom_pose: Pose | None = None) -> Pose:
        """World transform ``g`` with ``g * T_odom = T_graph`` for keyframe ``kid``."""
        if kid not in self.nodes:
            raise UnknownKeyframe(f"keyframe {kid} not in graph")
        node = self.nodes[kid]
        odom = node.odom_pose if odom_pose is None else odom_pose
        return compose(node.pose, inverse(odom))

    # -- g2o-style text -----------------------------------------------------------

    def write_g2o(self, path):
        """Vertices and edges as ``VERTEX_SE3:QUAT`` / ``EDGE_SE3:QUAT`` lines.

        An edge line ``EDGE_SE3:QUAT i j`` carries the pose of ``j`` in the
        frame of ``i`` followed by the upper triangle of the 6x6 information
        in [translation, rotation vector] coordinates. Comment lines starting
        with ``# vislam`` carry map membership and edge kinds.
        """
        with open(path, "w") as fh:
            for i, n in self.nodes.items():
                fh.write(f"# vislam-node {i} {n.map_id} {n.seq} {n.timestamp:.9f}\n")
                fh.write("VERTEX_SE3:QUAT %d %s\n" % (i, _pose_fields(n.pose)))
                if n.odom_pose is not None:
                    fh.write(f"# vislam-odom {i} {_pose_fields(n.odom_pose)}\n")
            for i in sorted(self.fixed):
                fh.write(f"FIX {i}\n")
            for kind, edges in (("seq", self.seq_edges), ("loop", self.loop_edges)):
                for e in edges:
                    inl = e.inliers if kind == "loop" else 0
                    fh.write(f"# vislam-edge {kind} {inl}\n")
                    iu = np.triu_indices(6)
                    info = " ".join("%.9g" % v for v in e.information[iu])
                    fh.write("EDGE_SE3:QUAT %d %d %s %s\n" % (e.k1, e.k, _pose_fields(e.measurement), info))

    @classmethod
    def read_g2o(cls, path):
        g = cls()
        meta = {}
        odom = {}
        pending_kind = ("seq", 0)
        fixed = []
        edges = []
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                parts = line.split()
                if not parts:
                    continue
                try:
                    if parts[0] == "#":
                        if len(parts) >= 2 and parts[1] == "vislam-node":
                            meta[int(parts[2])] = (int(parts[3]), int(parts[4]), float(parts[5]))
                        elif len(parts) >= 2 and parts[1] == "vislam-odom":
                            odom[int(parts[2])] = _parse_pose(parts[3:10])
                        elif len(parts) >= 2 and parts[1] == "vislam-edge":
                            pending_kind = (parts[2], int(parts[3]))
                        continue
                    tag = parts[0]
                    if tag == "VERTEX_SE3:QUAT":
                        i = int(parts[1])
                        map_id, seq, ts = meta.get(i, (0, len(g.nodes), 0.0))
                        g.nodes[i] = KeyframeNode(i, _parse_pose(parts[2:9]), timestamp=ts, map_id=map_id, seq=seq)
                    elif tag == "FIX":
                        fixed.append(int(parts[1]))
                    elif tag == "EDGE_SE3:QUAT":
                        j, i = int(parts[1]), int(parts[2])
                        M = _parse_pose(parts[3:10])
                        vals = np.array([float(x) for x in parts[10:31]])
                        if len(vals) != 21:
                            raise FormatError(f"{path}:{lineno}: information needs 21 values")
                        info = np.zeros((6, 6))
                        info[np.triu_indices(6)] = vals
                        info = info + np.triu(info, 1).T
                        edges.append((pending_kind, i, j, M, info))
                        pending_kind = ("seq", 0)
                    else:
                        raise FormatError(f"{path}:{lineno}: unknown tag {tag}")
                except (ValueError, IndexError) as exc:
                    raise FormatError(f"{path}:{lineno}: {exc}") from None
        for i, p in odom.items():
            if i in g.nodes:
                g.nodes[i].odom_pose = p
        for n in g.nodes.values():
            if n.odom_pose is None:
                n.odom_pose = n.pose
        g.fixed = set(fixed)
        for (kind, inl), i, j, M, info in edges:
            if kind == "loop":
                g.loop_edges.append(LoopEdge(i, j, M, info, inl))
            else:
                g.seq_edges.append(SeqEdge(i, j, M, info))
        return g


def _pose_fields(p: Pose):
    q = p.q
    return "%.9g %.9g %.9g %.9g %.9g %.9g %.9g" % (p.t[0], p.t[1], p.t[2], q[1], q[2], q[3], q[0])


def _parse_pose(vals):
    x, y, z, qx, qy, qz, qw = (float(v) for v in vals)
    return Pose(np.array([qw, qx, qy, qz]), np.array([x, y, z]))

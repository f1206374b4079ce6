"""Sparse Levenberg-Marquardt over manifold-valued parameter blocks.

Parameter blocks own their values; factors reference blocks and return raw
residuals/Jacobians plus a whitener (see factors module). The solver groups
factors into three assembly routes: a vectorized landmark-reprojection route
(Schur-eliminated), vectorized same-block groups (human joints), and a
generic per-factor route. Damped normal equations are solved by dense
Cholesky of the Schur-reduced system.
"""

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import geometry as geo
from . import kernels


class SolverError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# parameter blocks

class ParameterBlock:
    kind = "vec"

    def __init__(self, value, name=""):
        self.value = np.asarray(value, dtype=float).copy()
        self.constant = False
        self.name = name

    @property
    def ambient_dim(self):
        return self.value.shape[0]

    @property
    def tangent_dim(self):
        return self.value.shape[0]

    def boxplus(self, value, delta):
        return value + delta

    def boxminus(self, a, b):
        return a - b

    def __repr__(self):
        return "%s(%s%s)" % (type(self).__name__, self.name,
                             ", const" if self.constant else "")


class VecBlock(ParameterBlock):
    kind = "vec"


class PoseBlock(ParameterBlock):
    """Ambient [r(3), q(wxyz)]; tangent [dr, dalpha] with left increments."""

    kind = "pose"

    def __init__(self, pose, name=""):
        super().__init__(pose.to_vector(), name)

    @property
    def tangent_dim(self):
        return 6

    def boxplus(self, value, delta):
        out = np.empty(7)
        out[:3] = value[:3] + delta[:3]
        out[3:] = geo.quat_boxplus(value[3:], delta[3:])
        return out

    def boxminus(self, a, b):
        return np.concatenate([a[:3] - b[:3],
                               geo.quat_boxminus(a[3:], b[3:])])

    def pose(self):
        return geo.Pose(self.value[:3], self.value[3:])

    def set_pose(self, pose):
        self.value = pose.to_vector()


class HomPointBlock(ParameterBlock):
    """Homogeneous landmark [x, y, z, w]; 3-dim tangent.

    mode 'euclidean' keeps w fixed (updates xyz); mode 'unit' keeps |l| = 1
    and moves in the tangent plane, which stays stable for far points.
    """

    kind = "hom_point"

    def __init__(self, point, name="", mode="euclidean"):
        point = np.asarray(point, dtype=float)
        if point.shape == (3,):
            point = np.append(point, 1.0)
        if mode not in ("euclidean", "unit"):
            raise ValueError("unknown landmark mode %r" % mode)
        if mode == "unit":
            point = point / np.linalg.norm(point)
        super().__init__(point, name)
        self.mode = mode

    @property
    def tangent_dim(self):
        return 3

    def lift(self, value):
        """Ambient-from-tangent Jacobian (4x3)."""
        if self.mode == "euclidean":
            L = np.zeros((4, 3))
            L[:3, :3] = np.eye(3)
            return L
        # orthonormal basis of the tangent plane at the unit 4-vector
        _, _, vt = np.linalg.svd(value[None, :])
        return vt[1:].T

    def boxplus(self, value, delta):
        out = value + self.lift(value) @ delta
        if self.mode == "unit":
            out = out / np.linalg.norm(out)
        return out

    def boxminus(self, a, b):
        return self.lift(b).T @ (a - b)

    def point(self):
        return self.value[:3] / self.value[3]


# ---------------------------------------------------------------------------
# problem

class Problem:
    def __init__(self):
        self.blocks = []
        self._blockset = set()
        self.factors = []
        self.iteration_callbacks = []

    def add_block(self, block):
        if block not in self._blockset:
            self.blocks.append(block)
            self._blockset.add(block)
        return block

    def add_factor(self, factor):
        for b in factor.blocks:
            if b not in self._blockset:
                raise SolverError("factor %r references unknown block %r"
                                  % (factor, b))
        self.factors.append(factor)
        return factor

    def remove_factor(self, factor):
        self.factors.remove(factor)

    def remove_block(self, block):
        for f in self.factors:
            if block in f.blocks:
                raise SolverError("block %r still referenced by %r" % (block, f))
        self.blocks.remove(block)
        self._blockset.discard(block)

    def set_constant(self, block, flag=True):
        if block not in self._blockset:
            raise SolverError("unknown block %r" % block)
        block.constant = flag

    def set_active(self, factor, flag=True):
        if factor not in self.factors:
            raise SolverError("unknown factor %r" % factor)
        factor.active = flag

    def active_factors(self):
        return [f for f in self.factors if f.active]


@dataclass
class SolveOptions:
    max_iterations: int = 10          # 0 = uncapped (tolerance-terminated)
    lm_lambda_init: float = 1e-4
    lm_lambda_min: float = 1e-12
    lm_lambda_max: float = 1e8
    function_tolerance: float = 1e-8
    gradient_tolerance: float = 1e-8
    schur: bool = True
    uncapped_limit: int = 100         # safety bound when max_iterations == 0

    def to_dict(self):
        return dict(self.__dict__)

    @staticmethod
    def from_dict(d):
        return SolveOptions(**d)


@dataclass
class SolveReport:
    iterations: int = 0
    initial_cost: float = 0.0
    final_cost: float = 0.0
    cost_trace: list = field(default_factory=list)
    wall_time_s: float = 0.0
    termination: str = "max_iterations"

    def to_dict(self):
        return {"iterations": self.iterations,
                "initial_cost": self.initial_cost,
                "final_cost": self.final_cost,
                "cost_trace": list(self.cost_trace),
                "wall_time_s": self.wall_time_s,
                "termination": self.termination}


def robust_rho(sq, scale):
    """Cauchy cost and IRLS weight for squared whitened norm sq."""
    if scale is None:
        return sq, 1.0
    c2 = scale * scale
    return c2 * np.log1p(sq / c2), 1.0 / (1.0 + sq / c2)


# ---------------------------------------------------------------------------
# evaluation items (built by the factor batch evaluators)

class FactorItem:
    """One generic factor: whitened residual + per-block whitened Jacobians."""

    __slots__ = ("factor", "res", "jacs", "cost", "w")

    def __init__(self, factor, res, jacs):
        self.factor = factor
        self.res = res
        self.jacs = jacs
        sq = float(res @ res)
        rho, self.w = robust_rho(sq, factor.robust)
        self.cost = 0.5 * rho

    def assemble(self, H, g, offsets):
        blocks = self.factor.blocks
        n = len(blocks)
        for i in range(n):
            oi = offsets.get(blocks[i], -1)
            if oi < 0:
                continue
            Ji = self.jacs[i]
            di = blocks[i].tangent_dim
            g[oi:oi + di] += self.w * (Ji.T @ self.res)
            for j in range(i, n):
                oj = offsets.get(blocks[j], -1)
                if oj < 0:
                    continue
                blk = self.w * (Ji.T @ self.jacs[j])
                dj = blocks[j].tangent_dim
                H[oi:oi + di, oj:oj + dj] += blk
                if j != i:
                    H[oj:oj + dj, oi:oi + di] += blk.T


class GroupItem:
    """Many same-shape factors sharing one block tuple (human joints)."""

    __slots__ = ("blocks", "res", "Jcat", "w", "cost", "col_dims")

    def __init__(self, blocks, res, Jcat, robust):
        self.blocks = blocks
        self.res = res      # (N, R)
        self.Jcat = Jcat    # (N, R, sum(tangent dims)) or None
        sq = np.einsum("nr,nr->n", res, res)
        if robust is None:
            self.cost = 0.5 * float(sq.sum())
            self.w = np.ones(res.shape[0])
        else:
            rho, w = robust_rho(sq, robust)
            self.cost = 0.5 * float(np.sum(rho))
            self.w = w
        self.col_dims = [b.tangent_dim for b in blocks]

    def assemble(self, H, g, offsets):
        Jw = self.Jcat * self.w[:, None, None]
        Hg = np.einsum("nri,nrj->ij", Jw, self.Jcat)
        gg = np.einsum("nri,nr->i", Jw, self.res)
        starts = np.concatenate([[0], np.cumsum(self.col_dims)])
        for i, bi in enumerate(self.blocks):
            oi = offsets.get(bi, -1)
            if oi < 0:
                continue
            si, ei = starts[i], starts[i + 1]
            g[oi:oi + ei - si] += gg[si:ei]
            for j, bj in enumerate(self.blocks):
                oj = offsets.get(bj, -1)
                if oj < 0:
                    continue
                sj, ej = starts[j], starts[j + 1]
                H[oi:oi + ei - si, oj:oj + ej - sj] += Hg[si:ei, sj:ej]


class LandmarkItem:
    """Batched landmark reprojections routed to the Schur kernels."""

    __slots__ = ("pose_blocks", "lm_blocks", "res", "Jp", "Jl", "w", "cost")

    def __init__(self, pose_blocks, lm_blocks, res, Jp, Jl, robust):
        self.pose_blocks = pose_blocks
        self.lm_blocks = lm_blocks
        self.res = res
        self.Jp = Jp
        self.Jl = Jl
        sq = np.einsum("nr,nr->n", res, res)
        if robust is None:
            self.cost = 0.5 * float(sq.sum())
            self.w = np.ones(res.shape[0])
        else:
            rho, w = robust_rho(sq, robust)
            self.cost = 0.5 * float(np.sum(rho))
            self.w = w

    def assemble_dense(self, H, g, offsets):
        # no-schur fallback: scatter both pose and landmark blocks densely
        for n in range(self.res.shape[0]):
            pb, lb = self.pose_blocks[n], self.lm_blocks[n]
            po = offsets.get(pb, -1)
            lo = offsets.get(lb, -1)
            w = self.w[n]
            Jp, Jl, r = self.Jp[n], self.Jl[n], self.res[n]
            if po >= 0:
                H[po:po + 6, po:po + 6] += w * Jp.T @ Jp
                g[po:po + 6] += w * Jp.T @ r
            if lo >= 0:
                H[lo:lo + 3, lo:lo + 3] += w * Jl.T @ Jl
                g[lo:lo + 3] += w * Jl.T @ r
            if po >= 0 and lo >= 0:
                blk = w * Jp.T @ Jl
                H[po:po + 6, lo:lo + 3] += blk
                H[lo:lo + 3, po:po + 6] += blk.T


# batch evaluators registered by the factors module, keyed by factor kind;
# fall back to per-factor evaluate() for unknown kinds
BATCH_EVALUATORS = {}


def register_batch_evaluator(kind, fn):
    BATCH_EVALUATORS[kind] = fn


def evaluate_problem(problem, values, jac=True):
    """Evaluate all active factors.

    Returns (items, total_cost, n_rows) where n_rows counts valid residual
    rows; a solve step that invalidates observations (e.g. pushes a point
    behind a camera) must not look cheaper just because terms dropped out.
    """
    groups = {}
    singles = []
    for f in problem.active_factors():
        if f.kind in BATCH_EVALUATORS:
            groups.setdefault(f.kind, []).append(f)
        else:
            singles.append(f)

    items = []
    for kind, fs in groups.items():
        items.extend(BATCH_EVALUATORS[kind](fs, values, jac))
    for f in singles:
        out = f.evaluate_whitened([values[b] for b in f.blocks], jac)
        if out is None:
            continue
        res, jacs = out
        if not np.all(np.isfinite(res)):
            raise SolverError("factor %r produced non-finite residual" % f)
        items.append(FactorItem(f, res, jacs))
    cost = float(sum(it.cost for it in items))
    n_rows = sum(it.res.shape[0] if it.res.ndim > 1 else 1 for it in items)
    return items, cost, n_rows


# ---------------------------------------------------------------------------
# solve

def _assign_offsets(problem, use_schur):
    """Split blocks into dense tangent offsets and Schur-eliminated landmarks."""
    lm_eligible = set()
    if use_schur:
        for b in problem.blocks:
            if b.kind == "hom_point" and not b.constant:
                lm_eligible.add(b)
        # only blocks referenced exclusively by landmark reprojections survive
        for f in problem.active_factors():
            if f.kind != "landmark_reproj":
                for b in f.blocks:
                    lm_eligible.discard(b)
    offsets = {}
    d = 0
    for b in problem.blocks:
        if b.constant or b in lm_eligible:
            continue
        offsets[b] = d
        d += b.tangent_dim
    lm_index = {b: i for i, b in enumerate(
        [b for b in problem.blocks if b in lm_eligible])}
    return offsets, lm_index, d


def _merge_landmark_items(items, offsets, lm_index):
    """Concatenate landmark items and sort observations by landmark index."""
    lm_items = [it for it in items if isinstance(it, LandmarkItem)]
    if not lm_items or not lm_index:
        return None
    Jp = np.concatenate([it.Jp for it in lm_items])
    Jl = np.concatenate([it.Jl for it in lm_items])
    res = np.concatenate([it.res for it in lm_items])
    w = np.concatenate([it.w for it in lm_items])
    pose_off = np.array([offsets.get(b, -1)
                         for it in lm_items for b in it.pose_blocks],
                        dtype=np.int64)
    lm_idx = np.array([lm_index.get(b, -1)
                       for it in lm_items for b in it.lm_blocks],
                      dtype=np.int64)
    keep = lm_idx >= 0  # landmarks that fell back to dense are handled there
    if not np.all(keep):
        Jp, Jl, res, w = Jp[keep], Jl[keep], res[keep], w[keep]
        pose_off, lm_idx = pose_off[keep], lm_idx[keep]
    order = np.argsort(lm_idx, kind="stable")
    n_lm = len(lm_index)
    group_ptr = np.searchsorted(lm_idx[order], np.arange(n_lm + 1))
    return (Jp[order], Jl[order], res[order], w[order], pose_off[order],
            lm_idx[order], group_ptr)


def _build_normal_equations(items, offsets, lm_index, n_dense):
    H = np.zeros((n_dense, n_dense))
    g = np.zeros(n_dense)
    for it in items:
        if isinstance(it, LandmarkItem):
            continue
        it.assemble(H, g, offsets)
    merged = _merge_landmark_items(items, offsets, lm_index)
    lm_sys = None
    if merged is not None:
        Jp, Jl, res, w, pose_off, lm_idx, group_ptr = merged
        Hpp, bp, Hll, bl, B = kernels.landmark_normal_equations(
            pose_off, lm_idx, Jp, Jl, res, w, n_dense, len(lm_index))
        H += Hpp
        g += bp
        lm_sys = (Hll, bl, B, pose_off, group_ptr)
    # landmarks not in lm_index (dense fallback)
    for it in items:
        if isinstance(it, LandmarkItem):
            dense_rows = [k for k in range(it.res.shape[0])
                          if it.lm_blocks[k] not in lm_index]
            if dense_rows:
                sub = LandmarkItem([it.pose_blocks[k] for k in dense_rows],
                                   [it.lm_blocks[k] for k in dense_rows],
                                   it.res[dense_rows], it.Jp[dense_rows],
                                   it.Jl[dense_rows], None)
                sub.w = it.w[dense_rows]
                sub.assemble_dense(H, g, offsets)
    return H, g, lm_sys


def solve(problem, options=None):
    """Levenberg-Marquardt with landmark Schur elimination."""
    options = options or SolveOptions()
    t_start = time.perf_counter()
    report = SolveReport()

    offsets, lm_index, n_dense = _assign_offsets(problem, options.schur)
    if n_dense == 0 and not lm_index:
        # everything constant: report the current cost, touch nothing
        values = {b: b.value for b in problem.blocks}
        _, cost, _ = evaluate_problem(problem, values, jac=False)
        report.initial_cost = report.final_cost = cost
        report.termination = "all_constant"
        report.wall_time_s = time.perf_counter() - t_start
        return report

    values = {b: b.value.copy() for b in problem.blocks}
    for cb in problem.iteration_callbacks:
        cb(values)
    items, cost, n_rows = evaluate_problem(problem, values, jac=True)
    report.initial_cost = cost

    lam = options.lm_lambda_init
    max_iter = options.max_iterations or options.uncapped_limit
    termination = "max_iterations"
    it_count = 0
    need_jacobians = False

    while it_count < max_iter:
        if need_jacobians:
            for cb in problem.iteration_callbacks:
                cb(values)
            items, cost, n_rows = evaluate_problem(problem, values, jac=True)
            need_jacobians = False
        H, g, lm_sys = _build_normal_equations(items, offsets, lm_index,
                                               n_dense)
        gnorm = np.max(np.abs(g)) if g.size else 0.0
        if lm_sys is not None and lm_sys[1].size:
            gnorm = max(gnorm, float(np.max(np.abs(lm_sys[1]))))
        if gnorm < options.gradient_tolerance:
            termination = "gradient_tolerance"
            break

        it_count += 1
        # damp the dense diagonal; landmark damping happens in schur_reduce
        H_d = H.copy()
        dg = np.einsum("ii->i", H_d)
        dg += lam * np.abs(dg) + lam * 1e-6

        if lm_sys is not None:
            Hll, bl, B, pose_off, group_ptr = lm_sys
            H_red, b_red, Hll_inv = kernels.schur_reduce(
                H_d, g, Hll, bl, B, pose_off, group_ptr, lam)
        else:
            H_red, b_red = H_d, g

        if H_red.shape[0] == 0:
            delta = np.zeros(0)
        else:
            try:
                chol = scipy.linalg.cho_factor(H_red, lower=True,
                                               check_finite=False)
                delta = scipy.linalg.cho_solve(chol, -b_red,
                                               check_finite=False)
            except (scipy.linalg.LinAlgError, ValueError):
                lam = lam * 10.0
                report.cost_trace.append(cost)
                if lam > options.lm_lambda_max:
                    termination = "lambda_limit"
                    break
                continue

        candidate = dict(values)
        for b, off in offsets.items():
            candidate[b] = b.boxplus(values[b], delta[off:off + b.tangent_dim])
        if lm_sys is not None:
            delta_lm = kernels.landmark_backsub(Hll_inv, bl, B, pose_off,
                                                group_ptr, delta)
            for b, i in lm_index.items():
                candidate[b] = b.boxplus(values[b], delta_lm[i])

        _, new_cost, new_rows = evaluate_problem(problem, candidate, jac=False)
        if new_rows < n_rows:
            new_cost = np.inf  # step invalidated observations: reject
        report.cost_trace.append(new_cost if new_cost < cost else cost)
        if new_cost < cost:
            accepted_drop = cost - new_cost
            values = candidate
            cost = new_cost
            lam = max(lam / 3.0, options.lm_lambda_min)
            need_jacobians = True
            # semi-relative: behaves absolutely once the cost is tiny
            if accepted_drop <= options.function_tolerance * (cost + 1.0):
                termination = "function_tolerance"
                break
        else:
            lam = lam * 4.0
            if lam > options.lm_lambda_max:
                termination = "lambda_limit"
                break

    # write accepted values back into the blocks
    for b in problem.blocks:
        b.value = values[b]
    report.iterations = it_count
    report.final_cost = cost
    report.termination = termination
    report.wall_time_s = time.perf_counter() - t_start
    return report


# ---------------------------------------------------------------------------
# jacobian checking

@dataclass
class JacobianViolation:
    factor_index: int
    kind: str
    block_index: int
    max_abs_err: float
    max_rel_err: float

    def __str__(self):
        return ("factor %d (%s) block %d: abs %.3g rel %.3g"
                % (self.factor_index, self.kind, self.block_index,
                   self.max_abs_err, self.max_rel_err))


def check_jacobians(problem, rtol=1e-5, atol=1e-8, h=1e-6):
    """Manifold-aware central finite differences for every active factor."""
    values = {b: b.value for b in problem.blocks}
    violations = []
    for fi, f in enumerate(problem.active_factors()):
        vals = [values[b] for b in f.blocks]
        out = f.evaluate(vals, jac=True)
        if out is None:
            continue
        _, jacs = out
        for bi, b in enumerate(f.blocks):
            if b.constant:
                continue
            td = b.tangent_dim
            J_fd = np.zeros((f.residual_dim, td))
            ok = True
            for k in range(td):
                d = np.zeros(td)
                d[k] = h
                vp = list(vals)
                vm = list(vals)
                vp[bi] = b.boxplus(vals[bi], d)
                vm[bi] = b.boxplus(vals[bi], -d)
                outp = f.evaluate(vp, jac=False)
                outm = f.evaluate(vm, jac=False)
                if outp is None or outm is None:
                    ok = False
                    break
                J_fd[:, k] = (outp[0] - outm[0]) / (2 * h)
            if not ok:
                continue
            abs_err = float(np.max(np.abs(jacs[bi] - J_fd)))
            rel_err = abs_err / max(1.0, float(np.max(np.abs(J_fd))))
            # violation only when both the absolute floor and the relative
            # bound (wrt the block magnitude) are exceeded
            if abs_err > atol and rel_err > rtol:
                violations.append(JacobianViolation(
                    fi, f.kind, bi, abs_err, rel_err))
    return violations

"""Exact blur decomposition from known integer flows.

Content moving along a trajectory keeps one value in every frame it visits,
so tying pixels together along flow chains leaves one unknown per chain.
Each pixel then contributes one equation: the mean of the chain values that
pass through it over the exposure equals its (linear-space) blurry value.
On occlusion-free toy scenes the resulting sparse system is uniquely
solvable and recovers the sharp frames to solver precision, which makes
this the ground-truth oracle the learned decomposer is measured against.

Chains are built from integer-valued flows.  A trajectory that leaves the
frame, or whose target pixel is contested in a way the occlusion rule cannot
settle, terminates; the affected unknowns simply cover fewer frames.  Chain
values the system cannot certify are reported and filled with the blurry
value rather than guessed.
"""

import dataclasses

import numpy as np
from scipy.sparse import coo_matrix, csgraph, csr_matrix
from scipy.sparse.linalg import lsqr, splu

from .scenegen import BlurryImage, SharpSequence, gamma_decode, gamma_encode

PIVOT_RTOL = 1e-9


@dataclasses.dataclass
class PixelChain:
    """Trajectory of one frame-1 pixel across the exposure, as (x, y) rows."""

    positions: np.ndarray
    valid: bool

    def __len__(self):
        return len(self.positions)


@dataclasses.dataclass
class DecompositionReport:
    t: int
    n_pixels: int
    n_components: int
    n_valid_chains: int
    n_invalid_chains: int
    n_undetermined_components: int
    n_inconsistent_equations: int
    filled_fraction: float
    max_reblur_residual: float
    valid_mask: np.ndarray
    method: str
    certified_unique: bool = False

    def to_text(self):
        lines = [
            "frames: %d, pixels: %d" % (self.t, self.n_pixels),
            "chain components: %d (%d full anchored chains, %d broken)"
            % (self.n_components, self.n_valid_chains, self.n_invalid_chains),
            "undetermined components: %d" % self.n_undetermined_components,
            "inconsistent equations: %d" % self.n_inconsistent_equations,
            "filled output fraction: %.4f" % self.filled_fraction,
            "max re-blur residual (valid pixels): %.3e" % self.max_reblur_residual,
            "solver: %s (uniqueness certified: %s)" % (self.method, self.certified_unique),
        ]
        return "\n".join(lines)


def _integer_flows(flows):
    arrays = []
    for f in flows:
        arr = np.asarray(getattr(f, "flow", f), dtype=np.float64)
        arrays.append(np.rint(arr).astype(np.int64))
    return arrays


def _layer_edges(flow_int, h, w, wrap):
    """Candidate edges of one transition: flat source/target plus validity."""
    yy, xx = np.mgrid[0:h, 0:w]
    tx = xx + flow_int[..., 0]
    ty = yy + flow_int[..., 1]
    if wrap:
        inside = np.ones((h, w), dtype=bool)
        tx = tx % w
        ty = ty % h
    else:
        inside = (tx >= 0) & (tx < w) & (ty >= 0) & (ty < h)
        tx = np.clip(tx, 0, w - 1)
        ty = np.clip(ty, 0, h - 1)
    src = (yy * w + xx).ravel()
    dst = (ty * w + tx).ravel()
    return src, dst, inside.ravel()


def _resolve_collisions(src, dst, moving, keep):
    """Drop contested in-edges: a unique moving source wins, else all lose.

    Moving content occludes static content in the constant-velocity toy
    world, so when several chains land on one pixel the single moving one
    carries the visible value forward.  Two moving arrivals are genuinely
    ambiguous and every contested edge is cut.
    """
    live = np.flatnonzero(keep)
    order = live[np.argsort(dst[live], kind="stable")]
    sorted_dst = dst[order]
    starts = np.flatnonzero(np.r_[True, sorted_dst[1:] != sorted_dst[:-1]])
    counts = np.diff(np.r_[starts, len(sorted_dst)])
    for s, c in zip(starts, counts):
        if c < 2:
            continue
        group = order[s : s + c]
        movers = group[moving[group]]
        if len(movers) == 1:
            losers = group[group != movers[0]]
        else:
            losers = group
        keep[losers] = False
    return keep


def build_chain_components(flows, h, w, wrap=False):
    """Connected components of the chain graph over T*H*W pixel-nodes.

    Returns (component_id array of shape (T, H, W), kept-edge target map of
    shape (T-1, H*W) holding flat targets or -1).
    """
    flows_int = _integer_flows(flows)
    t_frames = len(flows_int) + 1
    p = h * w
    all_src = []
    all_dst = []
    targets = np.full((max(t_frames - 1, 0), p), -1, dtype=np.int64)
    for t, flow_int in enumerate(flows_int):
        src, dst, inside = _layer_edges(flow_int, h, w, wrap)
        moving = (flow_int[..., 0].ravel() != 0) | (flow_int[..., 1].ravel() != 0)
        keep = _resolve_collisions(src, dst, moving, inside.copy())
        kept = np.flatnonzero(keep)
        targets[t, src[kept]] = dst[kept]
        all_src.append(t * p + src[kept])
        all_dst.append((t + 1) * p + dst[kept])
    n = t_frames * p
    if all_src:
        rows = np.concatenate(all_src)
        cols = np.concatenate(all_dst)
        graph = csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    else:
        graph = csr_matrix((n, n))
    _, labels = csgraph.connected_components(graph, directed=False)
    return labels.reshape(t_frames, h, w), targets


def trace_chain(flows, x, y, h=None, w=None, wrap=False):
    """Follow one frame-1 pixel through the exposure.

    The chain is invalid if it leaves the frame or if any pixel it visits is
    also claimed by another trajectory (occlusion), in which case the
    positions recorded so far are returned.
    """
    flows_int = _integer_flows(flows)
    if flows_int:
        h, w = flows_int[0].shape[:2]
    elif h is None or w is None:
        raise ValueError("frame size required when there are no flows")
    positions = [(int(x), int(y))]
    cx, cy = int(x), int(y)
    for flow_int in flows_int:
        # count arrivals at the target to detect contested pixels
        dx = int(flow_int[cy, cx, 0])
        dy = int(flow_int[cy, cx, 1])
        nx, ny = cx + dx, cy + dy
        if wrap:
            nx %= w
            ny %= h
        elif not (0 <= nx < w and 0 <= ny < h):
            return PixelChain(np.array(positions, dtype=np.int64), False)
        _, dst, inside = _layer_edges(flow_int, h, w, wrap)
        arrivals = np.count_nonzero((dst == ny * w + nx) & inside)
        positions.append((nx, ny))
        if arrivals > 1:
            return PixelChain(np.array(positions, dtype=np.int64), False)
        cx, cy = nx, ny
    return PixelChain(np.array(positions, dtype=np.int64), True)


def _peel(row_cols, row_coeffs, col_rows, rhs, determined, values, tol):
    """Repeatedly solve equations that are down to one undetermined unknown.

    Classic topological elimination: determining a chain value substitutes
    it into every equation it appears in; equations reaching zero unknowns
    must close within tolerance or they are flagged inconsistent.
    """
    n_rows = len(row_cols)
    remaining = np.array([sum(1 for c in cols if not determined[c]) for cols in row_cols])
    rhs_adj = rhs.copy()
    queue = [r for r in range(n_rows) if remaining[r] == 1]
    inconsistent_rows = []
    scale = max(1.0, float(np.abs(rhs).max())) if rhs.size else 1.0
    while queue:
        row = queue.pop()
        if remaining[row] != 1:
            continue
        cols = row_cols[row]
        coeffs = row_coeffs[row]
        target = -1
        coeff = 0.0
        for c, a in zip(cols, coeffs):
            if not determined[c]:
                target, coeff = c, a
                break
        if target < 0:
            continue
        values[target] = rhs_adj[row] / coeff
        determined[target] = True
        for r2 in col_rows[target]:
            i = row_cols[r2].index(target)
            rhs_adj[r2] = rhs_adj[r2] - row_coeffs[r2][i] * values[target]
            remaining[r2] -= 1
            if remaining[r2] == 1:
                queue.append(r2)
            elif remaining[r2] == 0:
                if np.abs(rhs_adj[r2]).max() > tol * scale:
                    inconsistent_rows.append(r2)
    return remaining, rhs_adj, inconsistent_rows


def decompose_exact(blurry, flows, t=None, wrap=False, method="elim", tol=1e-8):
    """Recover the sharp sequence whose mean reproduces the blurry image.

    ``blurry`` is a BlurryImage (display-encoded; the system is formed in
    linear space using its gamma).  ``flows`` are the T-1 integer-valued
    fields between consecutive recovered frames.  ``wrap`` treats flow
    targets modulo the frame, for cyclic scenes whose content re-enters.
    ``method`` picks the reduced-system solver: "elim" factorizes the normal
    equations and certifies uniqueness through its pivots, "lsq" runs least
    squares without a certificate (used to cross-check elimination).

    Returns (SharpSequence, DecompositionReport).  Undetermined or
    uncertified chain values are filled with the blurry value and excluded
    from the report's valid mask; they are never invented.
    """
    if not isinstance(blurry, BlurryImage):
        raise TypeError("decompose_exact expects a BlurryImage")
    if method not in ("elim", "lsq"):
        raise ValueError("method must be 'elim' or 'lsq'")
    t_frames = len(flows) + 1
    if t is not None and t != t_frames:
        raise ValueError("t=%d disagrees with %d flow fields" % (t, len(flows)))
    h, w = blurry.shape
    p = h * w
    linear = gamma_decode(blurry.image.astype(np.float64), blurry.gamma).reshape(p, 3)

    if t_frames == 1:
        report = DecompositionReport(
            t=1, n_pixels=p, n_components=p, n_valid_chains=p, n_invalid_chains=0,
            n_undetermined_components=0, n_inconsistent_equations=0,
            filled_fraction=0.0, max_reblur_residual=0.0,
            valid_mask=np.ones((1, h, w), dtype=bool), method=method,
            certified_unique=True,
        )
        return SharpSequence(blurry.image[None].copy()), report

    comp, _targets = build_chain_components(flows, h, w, wrap=wrap)
    n_comp = int(comp.max()) + 1
    comp_flat = comp.reshape(t_frames, p)

    # one equation per pixel: sum over frames of that pixel's chain value
    rows = np.tile(np.arange(p), t_frames)
    cols = comp_flat.ravel()
    a = coo_matrix((np.ones(t_frames * p), (rows, cols)), shape=(p, n_comp)).tocsr()
    a.sum_duplicates()
    rhs = linear * t_frames

    row_cols = [list(a.indices[a.indptr[i] : a.indptr[i + 1]]) for i in range(p)]
    row_coeffs = [list(a.data[a.indptr[i] : a.indptr[i + 1]]) for i in range(p)]
    acsc = a.tocsc()
    col_rows = [list(acsc.indices[acsc.indptr[j] : acsc.indptr[j + 1]]) for j in range(n_comp)]

    determined = np.zeros(n_comp, dtype=bool)
    values = np.zeros((n_comp, 3), dtype=np.float64)
    uncertified = np.zeros(n_comp, dtype=bool)
    all_pivots_certified = True
    if method == "elim":
        remaining, rhs_adj, inconsistent_rows = _peel(
            row_cols, row_coeffs, col_rows, rhs, determined, values, tol
        )
        open_rows = np.flatnonzero(remaining > 0)
        open_cols = np.flatnonzero(~determined)
    else:
        # least squares attacks the whole assembled system in one go, as an
        # independent check on the elimination order
        inconsistent_rows = []
        rhs_adj = rhs
        open_rows = np.arange(p)
        open_cols = np.arange(n_comp)

    if len(open_cols):
        col_index = np.full(n_comp, -1)
        col_index[open_cols] = np.arange(len(open_cols))
        er, ec, ev = [], [], []
        for r in open_rows:
            for c, coeff in zip(row_cols[r], row_coeffs[r]):
                if not determined[c]:
                    er.append(r)
                    ec.append(col_index[c])
                    ev.append(coeff)
        row_index = np.full(p, -1)
        row_index[open_rows] = np.arange(len(open_rows))
        a_red = coo_matrix(
            (ev, (row_index[np.array(er)], ec)), shape=(len(open_rows), len(open_cols))
        ).tocsr()
        b_red = rhs_adj[open_rows]
        solved, certified = _solve_reduced(a_red, b_red, method, tol)
        if solved is not None:
            resid = a_red @ solved - b_red
            bad_rows = np.abs(resid).max(axis=1) > 1e-6 * max(1.0, float(np.abs(b_red).max()))
            for r in np.flatnonzero(bad_rows):
                inconsistent_rows.append(open_rows[r])
            values[open_cols] = solved
            determined[open_cols] = True
            if method == "elim" and not certified:
                uncertified[open_cols] = True
                all_pivots_certified = False
        else:
            uncertified[open_cols] = True
            all_pivots_certified = False

    for r in inconsistent_rows:
        for c in row_cols[r]:
            uncertified[c] = True

    good = determined & ~uncertified
    node_comp = comp_flat
    node_good = good[node_comp]
    out_linear = np.where(
        node_good[..., None], values[node_comp], linear[None].repeat(t_frames, axis=0)
    )
    frames = gamma_encode(np.clip(out_linear, 0.0, 1.0), blurry.gamma)
    frames = frames.reshape(t_frames, h, w, 3)

    valid_mask = node_good.reshape(t_frames, h, w)
    fully_valid_px = valid_mask.all(axis=0).reshape(p)
    if fully_valid_px.any():
        reblur = values[node_comp].mean(axis=0)
        max_resid = float(np.abs(reblur[fully_valid_px] - linear[fully_valid_px]).max())
    else:
        max_resid = float("nan")

    anchor_comp = comp_flat[0]
    sizes = np.bincount(comp_flat.ravel(), minlength=n_comp)
    full_chain = sizes[anchor_comp] == t_frames
    report = DecompositionReport(
        t=t_frames,
        n_pixels=p,
        n_components=n_comp,
        n_valid_chains=int(full_chain.sum()),
        n_invalid_chains=int((~full_chain).sum()),
        n_undetermined_components=int((~good).sum()),
        n_inconsistent_equations=len(set(inconsistent_rows)),
        filled_fraction=float(1.0 - node_good.mean()),
        max_reblur_residual=max_resid,
        valid_mask=valid_mask,
        method=method,
        certified_unique=bool(method == "elim" and all_pivots_certified and good.all()),
    )
    return SharpSequence(frames), report


def _solve_reduced(a_red, b_red, method, tol):
    """Solve the post-peeling system; returns (solution or None, certified)."""
    n_rows, n_cols = a_red.shape
    if n_rows < n_cols:
        return None, False
    if method == "lsq":
        sol = np.empty((n_cols, b_red.shape[1]))
        for ch in range(b_red.shape[1]):
            sol[:, ch] = lsqr(a_red, b_red[:, ch], atol=1e-14, btol=1e-14,
                              iter_lim=10 * max(n_cols, 100))[0]
        return sol, False
    gram = (a_red.T @ a_red).tocsc()
    try:
        lu = splu(gram, permc_spec="COLAMD", options={"SymmetricMode": True})
    except RuntimeError:
        return None, False
    diag = np.abs(lu.U.diagonal())
    if diag.min() <= PIVOT_RTOL * max(diag.max(), 1.0):
        return None, False
    sol = np.empty((n_cols, b_red.shape[1]))
    atb = a_red.T @ b_red
    for ch in range(b_red.shape[1]):
        sol[:, ch] = lu.solve(atb[:, ch])
    return sol, True

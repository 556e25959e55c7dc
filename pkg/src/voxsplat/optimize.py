"""Desk-scale numerical optimizer over Gaussian parameters.

Central differences of the total objective drive one plain descent step per
call, with per-group learning rates. Perturbing one splat only changes
pixels it touches, so instead of re-rendering the scene per parameter the
optimizer caches every splat's alpha image once per step and re-blends only
the affected rectangle. The transmittance ahead of a splat and the partial
products behind it do not depend on that splat's own alpha, so all of one
primitive's perturbations are evaluated in a single vectorized pass against
precomputed prefix/suffix factors; the resulting loss values equal a full
re-render up to float summation order, and the +h/-h rows of each central
difference go through identical code so no-op perturbations cancel exactly.

Gradients are normalized per group by their infinity norm, which makes each
learning rate the maximum per-step displacement of its group; raw gradients
of mean-normalized image losses are orders of magnitude too small for
fixed-rate descent. Memory cost is O(n_splats * pixels) per selected frame:
a desk-scale tool, not a production trainer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonFiniteLossError
from .losses import (SSIM_C1, SSIM_C2, SSIM_WINDOW, LossBreakdown,
                     _delta_depth, _valid_filter_matrix, filter_valid,
                     ssim_map)
from .renderer import (ALPHA_CEILING, ALPHA_SKIP, TRANSMITTANCE_EPS,
                       alpha_patch, gaussian_patch, project_points)
from .splat_init import SH0_BASIS, GaussianMap, sh0_to_rgb

GRAD_EPS = 1e-9          # gradients below this are treated as float noise
OPACITY_MIN = 0.001

# Perturbation row layout per primitive: geometry rows hold +h/-h pairs for
# 3 position dims, 3 scale dims and 4 quaternion dims; opacity and the 3
# color dims follow. Color rows reuse base geometry so they skip blending.
N_GEO = 20
ROW_OPACITY = 20
ROW_COLOR = 22
N_ROWS = 28


# ---------------------------------------------------------------------------
# Per-frame cache
# ---------------------------------------------------------------------------

@dataclass
class _FrameState:
    camera: object
    observed: np.ndarray
    proj: object                 # ProjectionSet in primitive order
    rgb: np.ndarray              # (N, 3) blended colors
    alphas: np.ndarray           # (N, H, W), zero outside each bbox
    weights: np.ndarray          # (N, H, W) blending weights
    color: np.ndarray            # (H, W, 3)
    depth_map: np.ndarray        # (H, W), patched in place during evals
    sil_map: np.ndarray          # (H, W)
    l1_map: np.ndarray           # (H, W) channel-summed |C - gt|
    l1_sum: float
    ssim_entries: np.ndarray     # (H-10, W-10) channel-mean map
    ssim_sum: float
    mu_ref: np.ndarray           # (3, H-10, W-10) reference window means
    var_ref: np.ndarray          # (3, H-10, W-10) reference window variances

    @property
    def shape(self):
        return self.observed.shape[:2]

    def overlap_rows(self, region, exclude=None) -> np.ndarray:
        x0, x1, y0, y1 = region
        b = self.proj.bbox
        m = (self.proj.valid & (b[:, 0] < x1) & (b[:, 1] > x0)
             & (b[:, 2] < y1) & (b[:, 3] > y0))
        if exclude is not None:
            m = m.copy()
            m[exclude] = False
        return np.flatnonzero(m)


def _build_frame_state(gmap: GaussianMap, camera, observed, near) -> _FrameState:
    n = len(gmap)
    H, W = camera.height, camera.width
    proj = project_points(gmap.positions, gmap.scales, gmap.rotations, camera, near)
    rgb = sh0_to_rgb(gmap.colors) if n else np.empty((0, 3))

    alphas = np.zeros((n, H, W))
    for i in np.flatnonzero(proj.valid):
        x0, x1, y0, y1 = proj.bbox[i]
        alphas[i, y0:y1, x0:x1] = alpha_patch(proj.mean2d[i], proj.cov2d[i],
                                              gmap.opacities[i], x0, x1, y0, y1)

    order = np.flatnonzero(proj.valid)
    order = order[np.argsort(proj.depth[order], kind="stable")]
    weights = np.zeros((n, H, W))
    if len(order):
        A = alphas[order].reshape(len(order), H * W)
        t_prev = np.ones_like(A)
        np.cumprod(1.0 - A[:-1], axis=0, out=t_prev[1:])
        w = A * t_prev * (t_prev >= TRANSMITTANCE_EPS)
        color = (w.T @ rgb[order]).reshape(H, W, 3)
        depth = (w * proj.depth[order, None]).sum(axis=0).reshape(H, W)
        sil = w.sum(axis=0).reshape(H, W)
        weights[order] = w.reshape(len(order), H, W)
    else:
        color = np.zeros((H, W, 3))
        depth = np.zeros((H, W))
        sil = np.zeros((H, W))

    observed = np.asarray(observed, dtype=float)
    l1_map = np.abs(color - observed).sum(axis=2)
    entries = ssim_map(color, observed)
    mu_ref = np.stack([filter_valid(observed[:, :, c]) for c in range(3)])
    var_ref = np.stack([filter_valid(observed[:, :, c] ** 2) for c in range(3)])
    var_ref = var_ref - mu_ref ** 2
    return _FrameState(camera=camera, observed=observed,
                       proj=proj, rgb=rgb, alphas=alphas, weights=weights,
                       color=color, depth_map=depth, sil_map=sil,
                       l1_map=l1_map, l1_sum=float(l1_map.sum()),
                       ssim_entries=entries, ssim_sum=float(entries.sum()),
                       mu_ref=mu_ref, var_ref=var_ref)


# ---------------------------------------------------------------------------
# Per-primitive working cache (prefix/suffix factorized blending)
# ---------------------------------------------------------------------------

class _PrimCache:
    """One primitive's bounding-box blending context in one frame.

    Splits the depth-ordered overlap stack at the primitive's slot: rows in
    front contribute a constant color/depth/silhouette prefix and a constant
    transmittance ``t_slot``; rows behind contribute through partial
    products that only need scaling by (1 - alpha_slot). Blending any number
    of slot variants is then a broadcast multiply, no cumprod.
    """

    def __init__(self, st: _FrameState, k: int):
        self.ok = bool(st.proj.valid[k])
        if not self.ok:
            return
        x0, x1, y0, y1 = (int(v) for v in st.proj.bbox[k])
        self.region = (x0, x1, y0, y1)
        h, w = y1 - y0, x1 - x0
        self.px = h * w
        self.hw = (h, w)
        rows = st.overlap_rows(self.region, exclude=k)
        depths = np.append(st.proj.depth[rows], st.proj.depth[k])
        ids = np.append(rows, k)
        order = np.lexsort((ids, depths))
        slot = int(np.nonzero(ids[order] == k)[0][0])
        self.base_depth = float(st.proj.depth[k])
        sorted_depths = depths[order]
        # strict depth bounds within which the presorted order stays valid
        self.lo = sorted_depths[slot - 1] if slot > 0 else -np.inf
        self.hi = (sorted_depths[slot + 1]
                   if slot + 1 < len(sorted_depths) else np.inf)

        stack = st.alphas[ids[order], y0:y1, x0:x1].reshape(len(ids), self.px)
        rgb = st.rgb[ids[order]]
        before, after = stack[:slot], stack[slot + 1:]
        t_before = np.ones_like(before)
        if slot > 1:
            np.cumprod(1.0 - before[:-1], axis=0, out=t_before[1:])
        w_before = before * t_before * (t_before >= TRANSMITTANCE_EPS)
        self.C_before = w_before.T @ rgb[:slot]                       # (px, 3)
        self.D_before = w_before.T @ sorted_depths[:slot]             # (px,)
        self.S_before = w_before.sum(axis=0)                          # (px,)
        if slot > 0:
            self.t_slot = t_before[-1] * (1.0 - before[-1])           # (px,)
        else:
            self.t_slot = np.ones(self.px)
        self.gate_slot = self.t_slot >= TRANSMITTANCE_EPS
        self.alphas_after = after                                     # (na, px)
        self.rgb_after = rgb[slot + 1:]
        self.depth_after = sorted_depths[slot + 1:]
        self.rgb_slot = st.rgb[k]
        m_suffix = np.ones_like(after)
        if len(after) > 1:
            np.cumprod(1.0 - after[:-1], axis=0, out=m_suffix[1:])
        self.m_suffix = m_suffix

        # region pixel coordinate grids, flattened
        ys, xs = np.mgrid[y0:y1, x0:x1]
        self.xs = xs.ravel().astype(float)
        self.ys = ys.ravel().astype(float)

        self.obs_region = st.observed[y0:y1, x0:x1].reshape(self.px, 3)
        self.base_l1 = float(st.l1_map[y0:y1, x0:x1].sum())

        # ssim bookkeeping: affected entry window and reference crops
        H, W = st.shape
        win = SSIM_WINDOW
        ey0, ey1 = max(0, y0 - win + 1), min(H - win + 1, y1)
        ex0, ex1 = max(0, x0 - win + 1), min(W - win + 1, x1)
        self.has_entries = ey0 < ey1 and ex0 < ex1
        if self.has_entries:
            py0, py1 = ey0, ey1 + win - 1
            px0, px1 = ex0, ex1 + win - 1
            self.paste = (y0 - py0, y1 - py0, x0 - px0, x1 - px0)
            self.base_crop = st.color[py0:py1, px0:px1, :].copy()
            self.ref_crop = st.observed[py0:py1, px0:px1, :]
            self.mu_b = np.stack([st.mu_ref[c][ey0:ey1, ex0:ex1]
                                  for c in range(3)], axis=2)
            self.var_b = np.stack([st.var_ref[c][ey0:ey1, ex0:ex1]
                                   for c in range(3)], axis=2)
            self.base_entry_sum = float(st.ssim_entries[ey0:ey1, ex0:ex1].sum())
            self.Mr = _valid_filter_matrix(py1 - py0, win, 1.5)
            self.McT = _valid_filter_matrix(px1 - px0, win, 1.5).T.copy()

    def order_holds(self, depth: float) -> bool:
        return (self.lo < depth < self.hi) or depth == self.base_depth

    def blend_rows(self, rows_alpha: np.ndarray, depths: np.ndarray):
        """Blend E slot variants at once.

        ``rows_alpha`` is (E, px) with skip/ceiling already applied (zero
        rows mean the primitive is absent). Returns color (E, px, 3),
        depth (E, px) and silhouette (E, px) buffers.
        """
        w_slot = rows_alpha * (self.t_slot * self.gate_slot)
        t_after = ((self.t_slot * (1.0 - rows_alpha))[:, None, :]
                   * self.m_suffix[None, :, :])
        w_after = self.alphas_after[None] * t_after * (t_after >= TRANSMITTANCE_EPS)
        w_after_t = w_after.transpose(0, 2, 1)  # (E, px, na)
        color = (self.C_before[None]
                 + w_slot[:, :, None] * self.rgb_slot
                 + np.matmul(w_after_t, self.rgb_after))
        depth = (self.D_before[None]
                 + w_slot * depths[:, None]
                 + np.matmul(w_after_t, self.depth_after))
        sil = self.S_before[None] + w_slot + w_after.sum(axis=1)
        return color, depth, sil

    def l1_deltas(self, colors: np.ndarray) -> np.ndarray:
        return (np.abs(colors - self.obs_region[None]).sum(axis=(1, 2))
                - self.base_l1)

    def ssim_deltas(self, colors: np.ndarray) -> np.ndarray:
        """Batched SSIM entry-sum deltas for E recolored regions."""
        E = len(colors)
        if not self.has_entries:
            return np.zeros(E)
        ph, pw, _ = self.base_crop.shape
        ry0, ry1, rx0, rx1 = self.paste
        crops = np.broadcast_to(self.base_crop, (E, ph, pw, 3)).copy()
        crops[:, ry0:ry1, rx0:rx1, :] = colors.reshape(E, *self.hw, 3)
        P = np.concatenate([crops, crops * crops,
                            crops * self.ref_crop[None]], axis=3)
        eh = self.Mr.shape[0]
        ew = self.McT.shape[1]
        T1 = np.matmul(self.Mr[None], P.reshape(E, ph, pw * 9))
        X = T1.reshape(E, eh, pw, 9).transpose(0, 1, 3, 2).reshape(E, eh * 9, pw)
        F = np.matmul(X, self.McT[None]).reshape(E, eh, 9, ew)
        F = F.transpose(0, 1, 3, 2)
        mu_a = F[..., 0:3]
        var_a = F[..., 3:6] - mu_a ** 2
        cov = F[..., 6:9] - mu_a * self.mu_b[None]
        num = (2 * mu_a * self.mu_b[None] + SSIM_C1) * (2 * cov + SSIM_C2)
        den = ((mu_a ** 2 + self.mu_b[None] ** 2 + SSIM_C1)
               * (var_a + self.var_b[None] + SSIM_C2))
        entries = (num / den).mean(axis=3)
        return entries.sum(axis=(1, 2)) - self.base_entry_sum

    def slot_alphas(self, projs, opacity):
        """(N_GEO+2, px) slot rows for the geometry and opacity perturbations.

        Returns (rows, depths, fast) where fast marks rows whose footprint
        stayed inside the cached region with a stable depth order; the rest
        must go through the generic path.
        """
        E = N_GEO
        x0, x1, y0, y1 = self.region
        rows = np.zeros((E + 2, self.px))
        depths = np.full(E + 2, self.base_depth)
        fast = np.ones(E + 2, dtype=bool)

        valid = projs.valid[:E]
        u = projs.mean2d[:E, 0]
        v = projs.mean2d[:E, 1]
        a = projs.cov2d[:E, 0, 0]
        b = projs.cov2d[:E, 0, 1]
        c = projs.cov2d[:E, 1, 1]
        det = a * c - b * b
        dx = self.xs[None, :] - u[:, None]
        dy = self.ys[None, :] - v[:, None]
        with np.errstate(divide="ignore", invalid="ignore"):
            power = (-0.5 * (c[:, None] * dx**2 - 2.0 * b[:, None] * dx * dy
                             + a[:, None] * dy**2) / det[:, None])
        alpha = opacity * np.exp(power)
        np.minimum(alpha, ALPHA_CEILING, out=alpha)
        alpha[alpha < ALPHA_SKIP] = 0.0
        # truncate at each row's own bounding box, matching the base render
        bb = projs.bbox[:E]
        inside = ((self.xs[None, :] >= bb[:, 0, None])
                  & (self.xs[None, :] < bb[:, 1, None])
                  & (self.ys[None, :] >= bb[:, 2, None])
                  & (self.ys[None, :] < bb[:, 3, None]))
        alpha *= inside
        rows[:E][valid] = alpha[valid]
        depths[:E][valid] = projs.depth[:E][valid]
        contained = ((bb[:, 0] >= x0) & (bb[:, 1] <= x1)
                     & (bb[:, 2] >= y0) & (bb[:, 3] <= y1))
        for e in range(E):
            if valid[e]:
                fast[e] = bool(contained[e]) and self.order_holds(float(depths[e]))
        return rows, depths, fast


# ---------------------------------------------------------------------------
# Structure-loss cache
# ---------------------------------------------------------------------------

@dataclass
class _StructureCache:
    points: np.ndarray
    points_sq: np.ndarray
    best: np.ndarray
    best_idx: np.ndarray
    second: np.ndarray
    base: float


def _structure_cache(points, gmap: GaussianMap) -> _StructureCache | None:
    if points is None or len(points) == 0 or len(gmap) == 0:
        return None
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    sbar = gmap.scales.mean(axis=1)
    d = np.sqrt(((pts[:, None, :] - gmap.positions[None, :, :]) ** 2).sum(axis=2))
    vals = d - sbar[None, :]
    best_idx = vals.argmin(axis=1)
    rows = np.arange(len(pts))
    best = vals[rows, best_idx]
    if vals.shape[1] > 1:
        vals[rows, best_idx] = np.inf
        second = vals.min(axis=1)
    else:
        second = np.full(len(pts), np.inf)
    return _StructureCache(points=pts, points_sq=(pts * pts).sum(axis=1),
                           best=best, best_idx=best_idx, second=second,
                           base=float(best.mean()))


def _structure_evals(cache: _StructureCache, k, new_pos, new_sbar) -> np.ndarray:
    """Structure loss for E (position, mean-scale) variants of primitive k."""
    d2 = (cache.points_sq[None, :]
          - 2.0 * (new_pos @ cache.points.T)
          + (new_pos * new_pos).sum(axis=1)[:, None])
    dk = np.sqrt(np.clip(d2, 0.0, None)) - new_sbar[:, None]
    is_best = cache.best_idx == k
    cur = np.where(is_best[None, :],
                   np.minimum(cache.second[None, :], dk),
                   np.minimum(cache.best[None, :], dk))
    return cur.mean(axis=1)


# ---------------------------------------------------------------------------
# Objective bookkeeping
# ---------------------------------------------------------------------------

class _Objective:
    def __init__(self, states, config, lp_cache):
        self.states = states
        self.lambda_ssim = config.lambda_ssim
        self.lambda_d = config.lambda_d
        self.lambda_p = config.lambda_p
        self.s_thresh = config.silhouette_threshold
        self.near = config.near_plane
        self.lp_cache = lp_cache
        self.need_ld = config.lambda_d > 0 and len(states) > 1
        self.base_ld = self.ld_total() if self.need_ld else 0.0
        self.pix_norm = [st.shape[0] * st.shape[1] * 3.0 for st in states]
        self.entry_norm = [float(st.ssim_entries.size) for st in states]
        self.nf = float(len(states))

    def ld_total(self) -> float:
        total = 0.0
        for a, b in zip(self.states[:-1], self.states[1:]):
            total += _delta_depth(a.camera, a.depth_map, a.sil_map,
                                  b.camera, b.depth_map, b.sil_map, self.s_thresh)
        return total

    def totals(self, dl1, dssim, ld_rows, lp_rows) -> np.ndarray:
        """Row-wise total losses from per-frame delta matrices.

        ``dl1`` and ``dssim`` are (n_frames, n_rows); ``ld_rows`` and
        ``lp_rows`` are (n_rows,).
        """
        l1 = np.zeros(dl1.shape[1])
        sm = np.zeros(dl1.shape[1])
        for i, st in enumerate(self.states):
            l1 += (st.l1_sum + dl1[i]) / self.pix_norm[i]
            sm += (st.ssim_sum + dssim[i]) / self.entry_norm[i]
        l1 /= self.nf
        sm /= self.nf
        return ((1.0 - self.lambda_ssim) * l1 + self.lambda_ssim * (1.0 - sm)
                + self.lambda_d * ld_rows + self.lambda_p * lp_rows)

    def base_breakdown(self) -> LossBreakdown:
        l1 = float(np.mean([st.l1_sum / n
                            for st, n in zip(self.states, self.pix_norm)]))
        sm = float(np.mean([st.ssim_sum / n
                            for st, n in zip(self.states, self.entry_norm)]))
        lp = self.lp_cache.base if self.lp_cache is not None else 0.0
        return LossBreakdown.combine(l1, sm, self.base_ld, lp, self.lambda_ssim,
                                     self.lambda_d, self.lambda_p)


def _perturbation_table(pos, scl, quat, h):
    """(N_GEO, ...) arrays of the +-h geometry perturbations of one primitive."""
    P = np.tile(pos, (N_GEO, 1))
    S = np.tile(scl, (N_GEO, 1))
    Q = np.tile(quat, (N_GEO, 1))
    r = 0
    for d in range(3):
        P[r, d] += h
        P[r + 1, d] -= h
        r += 2
    for d in range(3):
        S[r, d] = max(S[r, d] + h, 1e-12)
        S[r + 1, d] = max(S[r + 1, d] - h, 1e-12)
        r += 2
    for d in range(4):
        Q[r, d] += h
        Q[r + 1, d] -= h
        r += 2
    return P, S, Q


# ---------------------------------------------------------------------------
# Generic (slow) fallback for footprint or depth-order changes
# ---------------------------------------------------------------------------

def _union_region(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return (min(a[0], b[0]), max(a[1], b[1]), min(a[2], b[2]), max(a[3], b[3]))


def _generic_region_eval(lambda_ssim, st, k, proj, idx, opacity, old_region=None):
    """Re-blend the union region from scratch; exact but unamortized.

    Returns (dl1, dssim, region, (depth, sil)) or None when nothing changes.
    """
    new_box = (tuple(int(v) for v in proj.bbox[idx])
               if proj.valid[idx] else None)
    region = _union_region(old_region, new_box)
    if region is None:
        return None
    x0, x1, y0, y1 = region
    rows = st.overlap_rows(region, exclude=k)
    patches = st.alphas[rows, y0:y1, x0:x1]
    depths = st.proj.depth[rows]
    ids = rows
    if new_box is not None:
        bx0, bx1, by0, by1 = new_box
        row = np.zeros((y1 - y0, x1 - x0))
        row[by0 - y0:by1 - y0, bx0 - x0:bx1 - x0] = alpha_patch(
            proj.mean2d[idx], proj.cov2d[idx], opacity, bx0, bx1, by0, by1)
        patches = np.concatenate([patches, row[None]], axis=0)
        depths = np.append(depths, proj.depth[idx])
        ids = np.append(rows, k)
    h, w = y1 - y0, x1 - x0
    if not len(ids):
        new_color = np.zeros((h, w, 3))
        new_depth = np.zeros((h, w))
        new_sil = np.zeros((h, w))
    else:
        order = np.lexsort((ids, depths))
        A = patches[order].reshape(len(ids), -1)
        t_prev = np.ones_like(A)
        if len(ids) > 1:
            np.cumprod(1.0 - A[:-1], axis=0, out=t_prev[1:])
        wts = A * t_prev * (t_prev >= TRANSMITTANCE_EPS)
        new_color = (wts.T @ st.rgb[ids[order]]).reshape(h, w, 3)
        new_depth = (wts * depths[order, None]).sum(axis=0).reshape(h, w)
        new_sil = wts.sum(axis=0).reshape(h, w)
    dl1 = float(np.abs(new_color - st.observed[y0:y1, x0:x1]).sum()
                - st.l1_map[y0:y1, x0:x1].sum())
    dssim = _ssim_delta_slow(st, region, new_color) if lambda_ssim > 0 else 0.0
    return dl1, dssim, region, (new_depth, new_sil)


def _ssim_delta_slow(st: _FrameState, region, new_color) -> float:
    win = SSIM_WINDOW
    H, W = st.shape
    x0, x1, y0, y1 = region
    ey0, ey1 = max(0, y0 - win + 1), min(H - win + 1, y1)
    ex0, ex1 = max(0, x0 - win + 1), min(W - win + 1, x1)
    if ey0 >= ey1 or ex0 >= ex1:
        return 0.0
    py0, py1 = ey0, ey1 + win - 1
    px0, px1 = ex0, ex1 + win - 1
    crop = st.color[py0:py1, px0:px1, :].copy()
    crop[y0 - py0:y1 - py0, x0 - px0:x1 - px0, :] = new_color
    ref = st.observed[py0:py1, px0:px1, :]
    acc = None
    for ch in range(3):
        a = crop[:, :, ch]
        mu_a = filter_valid(a)
        var_a = filter_valid(a * a) - mu_a ** 2
        mu_b = st.mu_ref[ch][ey0:ey1, ex0:ex1]
        var_b = st.var_ref[ch][ey0:ey1, ex0:ex1]
        cov = filter_valid(a * ref[:, :, ch]) - mu_a * mu_b
        num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
        den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
        m = num / den
        acc = m if acc is None else acc + m
    new_entries = acc / 3.0
    return float(new_entries.sum() - st.ssim_entries[ey0:ey1, ex0:ex1].sum())


# ---------------------------------------------------------------------------
# The step
# ---------------------------------------------------------------------------

def _evaluate_primitive(obj: _Objective, gmap, k, config):
    """Total losses of all N_ROWS perturbations of primitive k, shape (N_ROWS,).

    Rows belonging to zero-rate groups are skipped (their central
    differences come out zero by construction).
    """
    states = obj.states
    nf = len(states)
    h = config.fd_step
    pos = gmap.positions[k]
    scl = gmap.scales[k]
    quat = gmap.rotations[k]
    opa = float(gmap.opacities[k])
    need_geo = (config.lr_position > 0 or config.lr_scale > 0
                or config.lr_rotation > 0)
    need_opa = config.lr_opacity > 0
    need_col = config.lr_color > 0

    P, S, Q = _perturbation_table(pos, scl, quat, h)
    dl1 = np.zeros((nf, N_ROWS))
    dssim = np.zeros((nf, N_ROWS))
    # per frame, per row: (region, (depth, sil)) patches for the depth loss
    ds_rows: list[list] = [[None] * N_ROWS for _ in range(nf)]
    blend_idx = (list(range(N_GEO)) if need_geo else []) + \
                ([N_GEO, N_GEO + 1] if need_opa else [])

    for i, st in enumerate(states):
        cache = _PrimCache(st, k)
        projs = (project_points(P, S, Q, st.camera, config.near_plane)
                 if need_geo else None)
        if not cache.ok:
            # culled in the base render: only perturbations that enter the
            # frustum change anything, and those go the generic way
            if need_geo:
                for e in np.flatnonzero(projs.valid):
                    res = _generic_region_eval(obj.lambda_ssim, st, k, projs,
                                               int(e), opa)
                    if res is not None:
                        dl1[i, e], dssim[i, e] = res[0], res[1]
                        ds_rows[i][e] = (res[2], res[3])
            continue

        x0, x1, y0, y1 = cache.region
        if blend_idx:
            if need_geo:
                rows, depths, fast = cache.slot_alphas(projs, opa)
            else:
                rows = np.zeros((N_GEO + 2, cache.px))
                depths = np.full(N_GEO + 2, cache.base_depth)
                fast = np.ones(N_GEO + 2, dtype=bool)
            if need_opa:
                # opacity rows: base footprint, rescaled raw density
                gauss = gaussian_patch(st.proj.mean2d[k], st.proj.cov2d[k],
                                       x0, x1, y0, y1).ravel()
                for j, value in enumerate((min(opa + h, 1.0),
                                           max(opa - h, 1e-6))):
                    arow = np.minimum(value * gauss, ALPHA_CEILING)
                    arow[arow < ALPHA_SKIP] = 0.0
                    rows[N_GEO + j] = arow
            sel = np.asarray(blend_idx)
            colors, depth_buf, sil_buf = cache.blend_rows(rows[sel], depths[sel])
            dl1_rows = cache.l1_deltas(colors)
            dssim_rows = (cache.ssim_deltas(colors) if obj.lambda_ssim > 0
                          else np.zeros(len(sel)))
            for pos_in_sel, e in enumerate(blend_idx):
                if e < N_GEO and not fast[e]:
                    res = _generic_region_eval(obj.lambda_ssim, st, k, projs,
                                               e, opa, old_region=cache.region)
                    if res is None:
                        continue
                    dl1[i, e], dssim[i, e] = res[0], res[1]
                    ds_rows[i][e] = (res[2], res[3])
                else:
                    dl1[i, e] = dl1_rows[pos_in_sel]
                    dssim[i, e] = dssim_rows[pos_in_sel]
                    if obj.need_ld:
                        ds_rows[i][e] = (cache.region,
                                         (depth_buf[pos_in_sel].reshape(cache.hw),
                                          sil_buf[pos_in_sel].reshape(cache.hw)))

        if need_col:
            # color rows: alphas unchanged, the color delta rides the cached
            # weight image; depth and silhouette stay at base
            wk = st.weights[k, y0:y1, x0:x1].reshape(cache.px)
            base_region = st.color[y0:y1, x0:x1].reshape(cache.px, 3)
            deltas = np.array([[h, 0, 0], [-h, 0, 0], [0, h, 0],
                               [0, -h, 0], [0, 0, h], [0, 0, -h]]) * SH0_BASIS
            recolored = base_region[None] + wk[None, :, None] * deltas[:, None, :]
            dl1[i, ROW_COLOR:] = cache.l1_deltas(recolored)
            if obj.lambda_ssim > 0:
                dssim[i, ROW_COLOR:] = cache.ssim_deltas(recolored)

    # delta-depth loss rows (only when several frames are selected)
    ld_rows = np.full(N_ROWS, obj.base_ld)
    if obj.need_ld:
        for e in range(N_ROWS):
            patches = []
            changed = False
            for i, st in enumerate(states):
                if ds_rows[i][e] is None:
                    continue
                region, (d_new, s_new) = ds_rows[i][e]
                rx0, rx1, ry0, ry1 = region
                patches.append((st, region,
                                st.depth_map[ry0:ry1, rx0:rx1].copy(),
                                st.sil_map[ry0:ry1, rx0:rx1].copy()))
                st.depth_map[ry0:ry1, rx0:rx1] = d_new
                st.sil_map[ry0:ry1, rx0:rx1] = s_new
                changed = True
            if changed:
                ld_rows[e] = obj.ld_total()
            for st, (rx0, rx1, ry0, ry1), d_save, s_save in patches:
                st.depth_map[ry0:ry1, rx0:rx1] = d_save
                st.sil_map[ry0:ry1, rx0:rx1] = s_save

    # structure loss rows: position and scale perturbations only
    lp_rows = np.full(N_ROWS, obj.lp_cache.base if obj.lp_cache else 0.0)
    if obj.lp_cache is not None and (config.lr_position > 0 or config.lr_scale > 0):
        lp_rows[:12] = _structure_evals(obj.lp_cache, k, P[:12],
                                        S[:12].mean(axis=1))
    return obj.totals(dl1, dssim, ld_rows, lp_rows)


def optimize_step(gmap: GaussianMap, frames, points, config) -> LossBreakdown:
    """One central-difference descent step over the active splats.

    ``frames`` carry ``.camera`` and ``.image``; ``points`` are the latest
    frame's scanned points for the structure term (may be None). Mutates
    ``gmap`` in place and returns the pre-step loss breakdown. Raises
    :class:`NonFiniteLossError` (leaving the map untouched) when any
    objective evaluation is non-finite.
    """
    if len(gmap) == 0:
        raise NonFiniteLossError("cannot optimize an empty map")
    states = [_build_frame_state(gmap, f.camera, f.image, config.near_plane)
              for f in frames]
    lp_cache = _structure_cache(points, gmap) if config.lambda_p > 0 else None
    obj = _Objective(states, config, lp_cache)
    base = obj.base_breakdown()
    if not np.isfinite(base.total):
        raise NonFiniteLossError(f"objective is not finite: {base.total}")

    active = np.zeros(len(gmap), dtype=bool)
    for st in states:
        active |= st.proj.valid
    n = len(gmap)
    h = config.fd_step
    grads = {
        "position": np.zeros((n, 3)), "scale": np.zeros((n, 3)),
        "rotation": np.zeros((n, 4)), "opacity": np.zeros(n),
        "color": np.zeros((n, 3)),
    }

    for k in np.flatnonzero(active):
        totals = _evaluate_primitive(obj, gmap, k, config)
        if not np.all(np.isfinite(totals)):
            raise NonFiniteLossError("perturbed objective is not finite")
        diffs = (totals[0::2] - totals[1::2]) / (2.0 * h)  # 14 central diffs
        grads["position"][k] = diffs[0:3]
        grads["scale"][k] = diffs[3:6]
        grads["rotation"][k] = diffs[6:10]
        grads["opacity"][k] = diffs[10]
        grads["color"][k] = diffs[11:14]

    if config.lr_position <= 0:
        grads["position"][:] = 0.0
    if config.lr_scale <= 0:
        grads["scale"][:] = 0.0
    if config.lr_rotation <= 0:
        grads["rotation"][:] = 0.0

    _apply_group(gmap.positions, grads["position"], config.lr_position)
    _apply_group(gmap.colors, grads["color"], config.lr_color)
    _apply_group(gmap.opacities, grads["opacity"], config.lr_opacity)
    np.clip(gmap.opacities, OPACITY_MIN, 1.0, out=gmap.opacities)
    _apply_group(gmap.scales, grads["scale"], config.lr_scale)
    np.maximum(gmap.scales, config.scale_floor, out=gmap.scales)
    if _apply_group(gmap.rotations, grads["rotation"], config.lr_rotation):
        norms = np.linalg.norm(gmap.rotations, axis=1, keepdims=True)
        bad = norms[:, 0] < 1e-12
        gmap.rotations[bad] = np.array([1.0, 0.0, 0.0, 0.0])
        norms[bad] = 1.0
        gmap.rotations /= norms
    return base


def _apply_group(array, grads, lr) -> bool:
    """Infinity-norm normalized descent step; the rate caps the displacement."""
    if lr <= 0:
        return False
    m = float(np.abs(grads).max()) if grads.size else 0.0
    if m <= GRAD_EPS:
        return False
    array -= lr * (grads / m)
    return True

"""Slow, independent reference implementations used to pin expected values.

Everything here is deliberately written as plain per-pixel / per-item loops,
separate from the library's vectorized code paths.
"""

import math


def point_in_polygon(px, py, vertices):
    """Even-odd (ray crossing) test for a single point; vertices [(x, y), ...]."""
    inside = False
    n = len(vertices)
    for i in range(n):
        x1, y1 = vertices[i]
        x2, y2 = vertices[(i + 1) % n]
        if (y1 > py) != (y2 > py):
            x_cross = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
            if px < x_cross:
                inside = not inside
    return inside


def rasterize_by_pixel(vertices, height, width):
    """Row-major list-of-lists mask from per-pixel-center containment tests."""
    grid = []
    for r in range(height):
        row = []
        for c in range(width):
            row.append(point_in_polygon(c + 0.5, r + 0.5, vertices))
        grid.append(row)
    return grid


def bbox_by_scan(grid):
    """(x_min, y_min, x_max, y_max) by exhaustive coordinate scan; None if empty."""
    xs, ys = [], []
    for r, row in enumerate(grid):
        for c, v in enumerate(row):
            if v:
                xs.append(c)
                ys.append(r)
    if not xs:
        return None
    return (min(xs), min(ys), max(xs) + 1, max(ys) + 1)


def iou_by_count(grid_a, grid_b):
    inter = union = 0
    for row_a, row_b in zip(grid_a, grid_b):
        for va, vb in zip(row_a, row_b):
            if va and vb:
                inter += 1
            if va or vb:
                union += 1
    return inter / union if union else 0.0


def histogram_by_count(image, mask_grid, bins):
    """Concatenated per-channel histogram by naive pixel loop, normalized."""
    values = [0.0] * (3 * bins)
    total = 0
    for r, row in enumerate(mask_grid):
        for c, keep in enumerate(row):
            if not keep:
                continue
            for ch in range(3):
                v = int(image[r][c][ch])
                values[ch * bins + v * bins // 256] += 1.0
                total += 1
    if total:
        values = [v / total for v in values]
    return values


def bhattacharyya_by_formula(p, q, floor=1e-12):
    """Direct high-precision evaluation of -ln(sum_i sqrt(p_i * q_i))."""
    coeff = sum(math.sqrt(a * b) for a, b in zip(p, q))
    return -math.log(max(coeff, floor))


def local_contrast_by_loop(image, mask_grid, bins):
    """Boundary-patch contrast by exhaustive loops.

    Boundary pixel: set, with at least one unset in-bounds 4-neighbor. Each
    5x5 patch is clipped at the border and split by mask membership; the mean
    of the per-patch distances is returned (None when no boundary exists).
    """
    h = len(mask_grid)
    w = len(mask_grid[0])
    distances = []
    for r in range(h):
        for c in range(w):
            if not mask_grid[r][c]:
                continue
            on_boundary = False
            for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                rr, cc = r + dr, c + dc
                if 0 <= rr < h and 0 <= cc < w and not mask_grid[rr][cc]:
                    on_boundary = True
            if not on_boundary:
                continue
            inside = [0.0] * (3 * bins)
            outside = [0.0] * (3 * bins)
            n_in = n_out = 0
            for rr in range(max(0, r - 2), min(h, r + 3)):
                for cc in range(max(0, c - 2), min(w, c + 3)):
                    target = inside if mask_grid[rr][cc] else outside
                    for ch in range(3):
                        v = int(image[rr][cc][ch])
                        target[ch * bins + v * bins // 256] += 1.0
                    if mask_grid[rr][cc]:
                        n_in += 1
                    else:
                        n_out += 1
            if n_in == 0 or n_out == 0:
                continue
            inside = [v / (3 * n_in) for v in inside]
            outside = [v / (3 * n_out) for v in outside]
            distances.append(bhattacharyya_by_formula(inside, outside))
    if not distances:
        return None
    return sum(distances) / len(distances)


def channel_means_by_loop(image):
    h = len(image)
    w = len(image[0])
    sums = [0.0, 0.0, 0.0]
    for r in range(h):
        for c in range(w):
            for ch in range(3):
                sums[ch] += float(image[r][c][ch])
    return tuple(s / (h * w) for s in sums)


def match_by_loops(det_scores, det_cats, gt_cats, iou_matrix, thr):
    """Greedy matching flags by explicit walk; returns {det index: is_tp}.

    Detections in descending score (ties by input index); each claims the
    highest-IoU free same-category ground truth with IoU >= thr, earliest
    index on IoU ties.
    """
    order = sorted(range(len(det_scores)), key=lambda i: (-det_scores[i], i))
    taken = [False] * len(gt_cats)
    flags = {}
    for d in order:
        best, best_iou = None, 0.0
        for g in range(len(gt_cats)):
            if taken[g] or gt_cats[g] != det_cats[d]:
                continue
            if iou_matrix[d][g] >= thr and iou_matrix[d][g] > best_iou:
                best, best_iou = g, iou_matrix[d][g]
        if best is not None:
            taken[best] = True
        flags[d] = best is not None
    return flags


def ap_by_definition(keyed_flags, n_gt):
    """101-point interpolated AP from (sort_key, is_tp) pairs, by loops."""
    pairs = sorted(keyed_flags, key=lambda e: e[0])
    tps = fps = 0
    points = []
    for _, tp in pairs:
        tps += 1 if tp else 0
        fps += 0 if tp else 1
        points.append((tps / n_gt, tps / (tps + fps)))
    total = 0.0
    for i in range(101):
        r = i / 100
        best = 0.0
        for rec, prec in points:
            if rec >= r and prec > best:
                best = prec
        total += best
    return total / 101


def evaluate_by_brute_force(dets, gts, mode, thresholds=None):
    """Dataset mask AP by pure loops.

    dets: (image_id, category, score, mask_grid) tuples;
    gts: (image_id, category, mask_grid) tuples.
    Returns (mAP, AP50, AP75, per_category dict).
    """
    thresholds = thresholds or [round(0.50 + 0.05 * i, 2) for i in range(10)]
    if mode == "agnostic":
        dets = [(d[0], 0, d[2], d[3]) for d in dets]
        gts = [(g[0], 0, g[2]) for g in gts]

    by_image = {}
    for d in dets:
        by_image.setdefault(d[0], []).append(d)
    capped = []
    for image_id in by_image:
        group = by_image[image_id]
        order = sorted(range(len(group)), key=lambda i: (-group[i][2], i))[:100]
        capped.extend(group[i] for i in sorted(order))

    categories = sorted({g[1] for g in gts})
    per_category = {}
    threshold_sums = [0.0] * len(thresholds)
    for cat in categories:
        cat_dets = [d for d in capped if d[1] == cat]
        cat_gts = [g for g in gts if g[1] == cat]
        image_ids = sorted({d[0] for d in cat_dets} | {g[0] for g in cat_gts})
        aps = []
        for t_idx, thr in enumerate(thresholds):
            keyed = []
            for image_id in image_ids:
                img_dets = [d for d in cat_dets if d[0] == image_id]
                img_gts = [g for g in cat_gts if g[0] == image_id]
                iou_matrix = [
                    [iou_by_count(d[3], g[2]) for g in img_gts] for d in img_dets
                ]
                flags = match_by_loops(
                    [d[2] for d in img_dets],
                    [d[1] for d in img_dets],
                    [g[1] for g in img_gts],
                    iou_matrix,
                    thr,
                )
                for idx, d in enumerate(img_dets):
                    keyed.append(((-d[2], image_id, idx), flags[idx]))
            ap = ap_by_definition(keyed, len(cat_gts))
            aps.append(ap)
            threshold_sums[t_idx] += ap
        per_category[cat] = sum(aps) / len(aps)

    n_cat = len(categories)
    per_threshold = [s / n_cat for s in threshold_sums]
    mean_ap = sum(per_threshold) / len(per_threshold)
    ap50 = per_threshold[thresholds.index(0.50)]
    ap75 = per_threshold[thresholds.index(0.75)]
    return mean_ap, ap50, ap75, per_category


def finite_difference_grads(loss_fn, params, step=1e-5):
    """Central-difference gradient of a scalar loss for each tensor in params.

    loss_fn takes no arguments and returns a python float computed from the
    current parameter values. Parameters are perturbed in place one element
    at a time and restored exactly.
    """
    import torch

    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat = p.view(-1)
            gflat = g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                hi = loss_fn()
                flat[i] = orig - step
                lo = loss_fn()
                flat[i] = orig
                gflat[i] = (hi - lo) / (2.0 * step)
            grads.append(g)
    return grads


def relative_grad_error(analytic, numeric):
    """Infinity-norm relative disagreement between two gradient lists."""
    import torch

    worst = 0.0
    for a, n in zip(analytic, numeric):
        scale = max(a.abs().max().item(), n.abs().max().item(), 1e-8)
        worst = max(worst, (a - n).abs().max().item() / scale)
    return worst

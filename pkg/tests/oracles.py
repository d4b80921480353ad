"""Independent reference computations used to freeze expected values."""

from fractions import Fraction


def box_iou(a, b):
    """IoU of (x, y, w, h) tuples, written out from first principles."""
    ax2, ay2 = a[0] + a[2], a[1] + a[3]
    bx2, by2 = b[0] + b[2], b[1] + b[3]
    iw = max(0.0, min(ax2, bx2) - max(a[0], b[0]))
    ih = max(0.0, min(ay2, by2) - max(a[1], b[1]))
    inter = iw * ih
    if inter == 0:
        return 0.0
    return inter / (a[2] * a[3] + b[2] * b[3] - inter)


def brute_force_ap(dets, gts):
    """All-point AP of one class.

    ``dets``: list of (image_id, (x, y, w, h), score) in input order.
    ``gts``: list of (image_id, (x, y, w, h)).
    Returns a Fraction, or None when there is no ground truth.
    """
    if not gts:
        return None
    ranked = sorted(enumerate(dets), key=lambda t: (-t[1][2], t[0]))
    taken = set()
    hits = []
    for _, (img, box, _) in ranked:
        candidates = []
        for g, (gimg, gbox) in enumerate(gts):
            if gimg != img or g in taken:
                continue
            ov = box_iou(box, gbox)
            if ov >= 0.5:
                candidates.append((-ov, g))
        if candidates:
            taken.add(min(candidates)[1])
            hits.append(True)
        else:
            hits.append(False)

    # every PR point obtained by cutting the ranking after r detections
    points = []
    for r in range(1, len(hits) + 1):
        tp = sum(hits[:r])
        points.append((Fraction(tp, len(gts)), Fraction(tp, r)))

    # integrate the interpolated precision over the distinct recall levels
    levels = sorted({rec for rec, _ in points if rec > 0})
    ap = Fraction(0)
    prev = Fraction(0)
    for level in levels:
        best = max(prec for rec, prec in points if rec >= level)
        ap += (level - prev) * best
        prev = level
    return ap


def bilinear_ramp(x, y):
    """The affine test field u + 2v evaluated at continuous coordinates."""
    return x + 2.0 * y

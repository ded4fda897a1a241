"""Independent brute-force reference implementations used by the tests."""
from fractions import Fraction


def counts(pred, gt):
    tp = fp = tn = fn = 0
    for p, g in zip(pred.ravel().tolist(), gt.ravel().tolist()):
        if p and g:
            tp += 1
        elif p:
            fp += 1
        elif g:
            fn += 1
        else:
            tn += 1
    return tp, fp, tn, fn


def ratio(num, den, empty):
    return Fraction(num, den) if den else Fraction(int(empty))


def metrics(pred, gt):
    tp, fp, tn, fn = counts(pred, gt)
    return {
        "precision": ratio(tp, tp + fp, fn == 0),
        "sensitivity": ratio(tp, tp + fn, fp == 0),
        "accuracy": ratio(tp + tn, tp + fp + tn + fn, True),
        "iou": ratio(tp, tp + fp + fn, True),
        "dsc": ratio(2 * tp, 2 * tp + fp + fn, True),
    }


def box_iou(a, b):
    ix = max(0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = Fraction(ix * iy)
    if inter == 0:
        return Fraction(0)
    area = lambda r: Fraction((r[2] - r[0]) * (r[3] - r[1]))  # noqa: E731
    return inter / (area(a) + area(b) - inter)


def average_precision(dets, gts, thresh):
    """dets: (box, confidence) with integer boxes; exact rational PR curve.

    Precision at each recall level is the maximum precision at any rank with
    recall at least that level; AP sums it over the recall steps.
    """
    if not gts:
        return Fraction(int(not dets))
    if not dets:
        return Fraction(0)
    area = lambda r: (r[2] - r[0]) * (r[3] - r[1])  # noqa: E731
    ranked = sorted(enumerate(dets), key=lambda e: (-e[1][1], -area(e[1][0]), e[0]))
    used = set()
    hits = []
    for _, (box, _) in ranked:
        cands = [(box_iou(box, g), j) for j, g in enumerate(gts) if j not in used]
        cands = [(v, j) for v, j in cands if v >= thresh]
        if cands:
            best = max(v for v, _ in cands)
            j = min(j for v, j in cands if v == best)
            used.add(j)
            hits.append(1)
        else:
            hits.append(0)
    points = []
    tp = 0
    for rank, h in enumerate(hits, 1):
        tp += h
        points.append((Fraction(tp, len(gts)), Fraction(tp, rank)))
    ap, prev = Fraction(0), Fraction(0)
    for r, _ in points:
        if r > prev:
            ap += (r - prev) * max(p for rr, p in points if rr >= r)
            prev = r
    return ap

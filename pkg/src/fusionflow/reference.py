"""Slow per-element reference implementations.

These loop over pixels in plain Python and share no code with the vectorized
operators, so agreement between the two is meaningful evidence. Inputs and
outputs are numpy arrays in NCHW (operators) or H x W x C (metrics) layout.
"""
import math

import numpy as np


def softplus(x):
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0)


def confidence_conv(f, c, weight, bias, conf_weight_raw, stride=1, eps=1e-8):
    n, cin, h, w = f.shape
    cout, _, k, _ = weight.shape
    r = k // 2
    w_hat = softplus(conf_weight_raw)
    ho = (h + 2 * r - k) // stride + 1
    wo = (w + 2 * r - k) // stride + 1
    f_out = np.zeros((n, cout, ho, wo))
    c_out = np.zeros((n, 1, ho, wo))
    for b in range(n):
        for i in range(ho):
            for j in range(wo):
                den = 0.0
                num = np.zeros(cout)
                for a in range(k):
                    for e in range(k):
                        y = i * stride + a - r
                        x = j * stride + e - r
                        if 0 <= y < h and 0 <= x < w:
                            tap = w_hat[a, e] * c[b, 0, y, x]
                            den += tap
                            num += tap * (weight[:, :, a, e] @ f[b, :, y, x])
                f_out[b, :, i, j] = num / (den + eps) + bias
                c_out[b, 0, i, j] = den / w_hat.sum()
    return f_out, c_out


def max_confidence_pool(f, c, window=2):
    n, ch, h, w = f.shape
    ho, wo = math.ceil(h / window), math.ceil(w / window)
    f_out = np.zeros((n, ch, ho, wo))
    c_out = np.zeros((n, 1, ho, wo))
    for b in range(n):
        for i in range(ho):
            for j in range(wo):
                best = None
                for a in range(window):
                    for e in range(window):
                        y, x = i * window + a, j * window + e
                        value = c[b, 0, y, x] if (y < h and x < w) else 0.0
                        if best is None or value > best[0]:
                            best = (value, y, x)
                value, y, x = best
                c_out[b, 0, i, j] = value
                if y < h and x < w:
                    f_out[b, :, i, j] = f[b, :, y, x]
    return f_out, c_out


def nn_upsample(x, factor=2):
    n, ch, h, w = x.shape
    out = np.zeros((n, ch, h * factor, w * factor))
    for i in range(h * factor):
        for j in range(w * factor):
            out[:, :, i, j] = x[:, :, i // factor, j // factor]
    return out


def warp(f_next, flow):
    n, ch, h, w = f_next.shape
    out = np.zeros_like(f_next, dtype=np.float64)
    for b in range(n):
        for i in range(h):
            for j in range(w):
                x = j + flow[b, 0, i, j]
                y = i + flow[b, 1, i, j]
                x0, y0 = math.floor(x), math.floor(y)
                for yy in (y0, y0 + 1):
                    for xx in (x0, x0 + 1):
                        weight = (1 - abs(x - xx)) * (1 - abs(y - yy))
                        if 0 <= yy < h and 0 <= xx < w:
                            out[b, :, i, j] += weight * f_next[b, :, yy, xx]
    return out


def cost_volume(f_ref, f_warp, radius):
    n, ch, h, w = f_ref.shape
    d = 2 * radius + 1
    out = np.zeros((n, d * d, h, w))
    for b in range(n):
        for i in range(h):
            for j in range(w):
                k = 0
                for dy in range(-radius, radius + 1):
                    for dx in range(-radius, radius + 1):
                        y, x = i + dy, j + dx
                        if 0 <= y < h and 0 <= x < w:
                            total = 0.0
                            for q in range(ch):
                                total += f_ref[b, q, i, j] * f_warp[b, q, y, x]
                            out[b, k, i, j] = total / ch
                        k += 1
    return out


def bilinear_upsample2(x):
    '''Half-pixel-centered x2 bilinear upsampling with edge clamping.'''
    n, ch, h, w = x.shape
    out = np.zeros((n, ch, 2 * h, 2 * w))
    for i in range(2 * h):
        sy = max((i + 0.5) / 2 - 0.5, 0.0)
        y0 = min(int(math.floor(sy)), h - 1)
        y1 = min(y0 + 1, h - 1)
        ly = sy - y0
        for j in range(2 * w):
            sx = max((j + 0.5) / 2 - 0.5, 0.0)
            x0 = min(int(math.floor(sx)), w - 1)
            x1 = min(x0 + 1, w - 1)
            lx = sx - x0
            out[:, :, i, j] = ((1 - ly) * (1 - lx) * x[:, :, y0, x0] + (1 - ly) * lx * x[:, :, y0, x1]
                               + ly * (1 - lx) * x[:, :, y1, x0] + ly * lx * x[:, :, y1, x1])
    return out


def multiscale_loss(level_fields, gt, valid, weights, levels=(6, 5, 4, 3, 2)):
    '''
    level_fields maps level -> N x 4 x h x w prediction (level 2 already
    refined); gt is N x 4 x H x W and valid N x H x W.
    '''
    n, _, h, w = gt.shape
    total = 0.0
    per_level = {}
    for level, alpha in zip(levels, weights):
        s = 2 ** level
        field_ = level_fields[level]
        errors = []
        for b in range(n):
            for i in range(h // s):
                for j in range(w // s):
                    acc = np.zeros(4)
                    count = 0
                    for y in range(i * s, (i + 1) * s):
                        for x in range(j * s, (j + 1) * s):
                            if valid[b, y, x]:
                                acc += gt[b, :, y, x]
                                count += 1
                    if count:
                        target = acc / count / s
                        errors.append(math.sqrt(sum((field_[b, q, i, j] - target[q]) ** 2 for q in range(4))))
        per_level[level] = sum(errors) / len(errors) if errors else 0.0
        total += alpha * per_level[level]
    return total, per_level


def metrics(pred, gt, valid):
    '''
    Dense metrics by explicit per-pixel loops; returns a dict of percentages
    and mean errors (None without valid pixels).
    '''
    h, w = valid.shape
    counts = {'D0': 0, 'D1': 0, 'Fl': 0, 'SF': 0}
    sf_sum = 0.0
    fl_sum = 0.0
    n = 0
    for i in range(h):
        for j in range(w):
            if not valid[i, j]:
                continue
            n += 1
            p, g = pred[i, j], gt[i, j]
            flow_err = math.hypot(p[0] - g[0], p[1] - g[1])
            flow_mag = math.hypot(g[0], g[1])
            outlier = {}
            outlier['Fl'] = flow_err > 3 and (flow_err > 0 if flow_mag == 0 else flow_err / flow_mag > 0.05)
            for name, q in (('D0', 2), ('D1', 3)):
                err = abs(p[q] - g[q])
                mag = abs(g[q])
                outlier[name] = err > 3 and (err > 0 if mag == 0 else err / mag > 0.05)
            for name in ('D0', 'D1', 'Fl'):
                counts[name] += outlier[name]
            counts['SF'] += outlier['D0'] or outlier['D1'] or outlier['Fl']
            sf_sum += math.sqrt(sum((p[q] - g[q]) ** 2 for q in range(4)))
            fl_sum += flow_err
    if n == 0:
        return {key: None for key in ('D0', 'D1', 'Fl', 'SF', 'SF_EPE', 'Fl_EPE')}
    out = {key: 100.0 * value / n for key, value in counts.items()}
    out['SF_EPE'] = sf_sum / n
    out['Fl_EPE'] = fl_sum / n
    return out


def point_3d(x, y, d, focal, cx, cy, baseline):
    z = focal * baseline / d
    return ((x - cx) * z / focal, (y - cy) * z / focal, z)


def sparse_metrics_3d(pred, gt, mask, focal, cx, cy, baseline):
    h, w = mask.shape
    outliers = 0
    total = 0.0
    n = 0
    for i in range(h):
        for j in range(w):
            if not mask[i, j]:
                continue
            p, g = pred[i, j], gt[i, j]
            if min(p[2], p[3], g[2], g[3]) <= 0:
                continue
            motion = []
            for f in (p, g):
                a = point_3d(j, i, f[2], focal, cx, cy, baseline)
                b = point_3d(j + f[0], i + f[1], f[3], focal, cx, cy, baseline)
                motion.append([b[k] - a[k] for k in range(3)])
            err = math.sqrt(sum((motion[0][k] - motion[1][k]) ** 2 for k in range(3)))
            mag = math.sqrt(sum(motion[1][k] ** 2 for k in range(3)))
            n += 1
            total += err
            outliers += err > 0.3 and (err > 0 if mag == 0 else err / mag > 0.1)
    if n == 0:
        return None, None
    return 100.0 * outliers / n, total / n

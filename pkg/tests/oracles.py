"""Independent reference implementations used by the tests.

These are written with explicit loops over numpy arrays and share no code
with the package.
"""

import numpy as np


def dense_kernel4d(weight_q, weight_s):
    """Expand the two 2D kernels of a center-pivot conv into a full 4D kernel."""
    cout, cin, kq, _ = weight_q.shape
    ks = weight_s.shape[-1]
    k = np.zeros((cout, cin, kq, kq, ks, ks))
    k[:, :, :, :, ks // 2, ks // 2] += weight_q
    k[:, :, kq // 2, kq // 2, :, :] += weight_s
    return k


def dense_conv4d(x, kernel, bias=None, stride_q=1, stride_s=1):
    """Zero-padded 4D convolution (cross-correlation), x (B, C, hq, wq, hs, ws)."""
    b, c, hq, wq, hs, ws = x.shape
    cout, _, kq, _, ks, _ = kernel.shape
    pq, ps = kq // 2, ks // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pq, pq), (pq, pq), (ps, ps), (ps, ps)))
    oq = [(hq + 2 * pq - kq) // stride_q + 1, (wq + 2 * pq - kq) // stride_q + 1]
    os_ = [(hs + 2 * ps - ks) // stride_s + 1, (ws + 2 * ps - ks) // stride_s + 1]
    out = np.zeros((b, cout, oq[0], oq[1], os_[0], os_[1]))
    for i in range(oq[0]):
        for j in range(oq[1]):
            for u in range(os_[0]):
                for v in range(os_[1]):
                    patch = xp[:, :, i * stride_q:i * stride_q + kq, j * stride_q:j * stride_q + kq,
                               u * stride_s:u * stride_s + ks, v * stride_s:v * stride_s + ks]
                    out[:, :, i, j, u, v] = np.einsum("bcwxyz,ocwxyz->bo", patch, kernel)
    if bias is not None:
        out += bias.reshape(1, -1, 1, 1, 1, 1)
    return out


def conv2d_loop(x, w, b, groups=1):
    """Same-padded stride-1 conv of a single image x (C, H, W), w (O, C/g, k, k)."""
    c, h, wd = x.shape
    o, cg, k, _ = w.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p)))
    out = np.zeros((o, h, wd))
    og = o // groups
    for oc in range(o):
        g = oc // og
        for y in range(h):
            for xx in range(wd):
                acc = b[oc]
                for ic in range(cg):
                    for dy in range(k):
                        for dx in range(k):
                            acc += w[oc, ic, dy, dx] * xp[g * cg + ic, y + dy, xx + dx]
                out[oc, y, xx] = acc
    return out


def sigmoid(a):
    return 1.0 / (1.0 + np.exp(-a))


def gru_oracle(x, h, gates):
    """gates: dict name -> list of (weight, bias, groups) applied in order."""
    def apply(name, inp):
        for w, b, g in gates[name]:
            inp = conv2d_loop(inp, w, b, g)
        return inp

    xh = np.concatenate([x, h])
    z = sigmoid(apply("update", xh))
    r = sigmoid(apply("reset", xh))
    cand = np.tanh(apply("candidate", np.concatenate([r * h, x])))
    return (1 - z) * h + z * cand


def bilinear_resize(img, out_h, out_w):
    """Half-pixel-centre bilinear resize of a 2D array (no antialiasing)."""
    h, w = img.shape
    out = np.zeros((out_h, out_w))
    for i in range(out_h):
        sy = max((i + 0.5) * h / out_h - 0.5, 0.0)
        y0 = min(int(np.floor(sy)), h - 1)
        y1 = min(y0 + 1, h - 1)
        fy = sy - y0
        for j in range(out_w):
            sx = max((j + 0.5) * w / out_w - 0.5, 0.0)
            x0 = min(int(np.floor(sx)), w - 1)
            x1 = min(x0 + 1, w - 1)
            fx = sx - x0
            out[i, j] = ((1 - fy) * ((1 - fx) * img[y0, x0] + fx * img[y0, x1])
                         + fy * ((1 - fx) * img[y1, x0] + fx * img[y1, x1]))
    return out


def cross_entropy(prob_fg, gt):
    """Mean two-class cross entropy from foreground probabilities."""
    p = np.where(gt, prob_fg, 1 - prob_fg)
    return float(-np.mean(np.log(p)))

"""Independent reference implementations used only by the tests."""
import numpy as np
from scipy import ndimage


def brute_conv3d(x, w, b, dilation):
    """Triple loop over output voxels and kernel taps, zero outside the volume."""
    co, ci, k = w.shape[:3]
    _, m, n, d = x.shape
    p = dilation * (k - 1) // 2
    out = np.zeros((co, m, n, d))
    for o in range(co):
        for X in range(m):
            for Y in range(n):
                for Z in range(d):
                    s = 0.0 if b is None else b[o]
                    for c in range(ci):
                        for i in range(k):
                            xx = X + i * dilation - p
                            if not 0 <= xx < m:
                                continue
                            for j in range(k):
                                yy = Y + j * dilation - p
                                if not 0 <= yy < n:
                                    continue
                                for l in range(k):
                                    zz = Z + l * dilation - p
                                    if 0 <= zz < d:
                                        s += w[o, c, i, j, l] * x[c, xx, yy, zz]
                    out[o, X, Y, Z] = s
    return out


def scipy_conv3d(x, w, b, dilation):
    """Multi-channel correlation via scipy with a zero-stuffed (dilated) kernel."""
    co, ci, k = w.shape[:3]
    kd = dilation * (k - 1) + 1
    out = np.zeros((co,) + x.shape[1:])
    for o in range(co):
        for c in range(ci):
            ker = np.zeros((kd, kd, kd))
            ker[::dilation, ::dilation, ::dilation] = w[o, c]
            out[o] += ndimage.correlate(x[c], ker, mode="constant", cval=0.0)
        if b is not None:
            out[o] += b[o]
    return out


def relu(x):
    return np.maximum(x, 0)


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def softmax(z):
    e = np.exp(z - z.max(axis=0))
    return e / e.sum(axis=0)


def conv_params(p):
    return p.weight.data, p.bias.data, p.dilation


def se_res(x, p):
    f = scipy_conv3d(relu(scipy_conv3d(x, *conv_params(p.conv1))), *conv_params(p.conv2))
    pooled = f.mean(axis=(1, 2, 3))
    s = sigmoid(p.se_fc2.weight.data @ relu(p.se_fc1.weight.data @ pooled + p.se_fc1.bias.data) + p.se_fc2.bias.data)
    return relu(x + s[:, None, None, None] * f)


def dense_aspp(x, p):
    feats = [x]
    for br in p.branches:
        feats.append(relu(scipy_conv3d(np.concatenate(feats), *conv_params(br))))
    return relu(scipy_conv3d(np.concatenate(feats), *conv_params(p.projection)))


def uncertainty_scalar(probs):
    """The product formula evaluated one voxel at a time in plain Python floats."""
    c = len(probs)
    prod = 1.0
    for v in probs:
        prod *= v
    return prod / (1.0 / c) ** c

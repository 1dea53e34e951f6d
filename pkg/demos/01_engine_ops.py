"""Tour of the tensor engine: convolutions, dilation, and gradient checking.

Run:  python demos/01_engine_ops.py
"""

import numpy as np

from dwrseg import engine as E
from dwrseg.engine.gradcheck import finite_diff_check

print("=== 1. conv2d is an exact windowed dot product ===")
x = np.ones((1, 1, 3, 3), np.float32)
w = np.ones((1, 1, 3, 3), np.float32)
out = E.conv2d_forward(x, w, None, E.ConvSpec(1, 1, 3, padding=1))
print("all-ones 3x3 input, all-ones 3x3 kernel, padding 1:")
print(out[0, 0])
print("corners see 4 taps, edges 6, the center all 9.\n")

print("=== 2. dilation spreads the taps ===")
x = np.zeros((1, 1, 9, 9), np.float32)
x[0, 0, 4, 4] = 1.0  # unit impulse
for d in (1, 2, 4):
    spec = E.ConvSpec(1, 1, 3, padding=d, dilation=d)
    taps = E.conv2d_forward(x, w, None, spec)[0, 0]
    rows = sorted(set(np.argwhere(taps > 0)[:, 0].tolist()))
    print(f"dilation {d}: impulse response rows {rows} (span {2 * d + 1})")
print()

print("=== 3. depthwise == per-channel convolution ===")
xc = np.random.default_rng(0).standard_normal((1, 3, 6, 6)).astype(np.float32)
wc = np.random.default_rng(1).standard_normal((3, 1, 3, 3)).astype(np.float32)
dw = E.conv2d_forward(xc, wc, None, E.ConvSpec(3, 3, 3, padding=1, groups=3))
per = [E.conv2d_forward(xc[:, c:c + 1], wc[c:c + 1], None,
                        E.ConvSpec(1, 1, 3, padding=1)) for c in range(3)]
print("bitwise equal to three 1-channel convs:",
      all(np.array_equal(dw[:, c:c + 1], per[c]) for c in range(3)), "\n")

print("=== 4. every backward is verified against finite differences ===")
spec = E.ConvSpec(2, 3, 3, padding=2, dilation=2)
rng = np.random.default_rng(2)
report = finite_diff_check(
    lambda x, w: E.conv2d_forward(x, w, None, spec),
    lambda x, w, go: E.conv2d_backward(x, w, spec, go)[:2],
    [rng.standard_normal((1, 2, 4, 4)), rng.standard_normal((3, 2, 3, 3))],
    input_names=["x", "w"])
print("dilated conv gradcheck:", report)

bn = E.BatchNormState.create(3)
xb = rng.standard_normal((2, 3, 4, 4))
report = finite_diff_check(
    lambda x, g, b: E.batchnorm_forward(x, E.BatchNormState(g, b, np.zeros(3), np.ones(3)), "train"),
    lambda x, g, b, go: E.batchnorm_backward(x, E.BatchNormState(g, b, np.zeros(3), np.ones(3)), go, "train"),
    [xb, np.ones(3), np.zeros(3)], input_names=["x", "gamma", "beta"])
print("batchnorm (train) gradcheck:", report, "\n")

print("=== 5. the tape composes ops and differentiates the whole chain ===")
tape = E.Tape()
xv = tape.leaf(rng.standard_normal((1, 2, 8, 8)).astype(np.float32), "x")
wv = tape.leaf(rng.standard_normal((4, 2, 3, 3)).astype(np.float32), "w")
h = tape.relu(tape.conv2d(xv, wv, None, E.ConvSpec(2, 4, 3, padding=1)))
y = tape.maxpool(h, 2, 2)
print("forward chain: conv -> relu -> maxpool, output", y.data.shape)
grads = tape.backward(y, np.ones_like(y.data))
print("gradient flowed back to x:", grads[xv.idx].shape,
      "and w:", grads[wv.idx].shape)

print("\n=== 6. runs are bitwise deterministic ===")
a = E.conv2d_forward(xc, wc, None, E.ConvSpec(3, 3, 3, padding=1, groups=3))
b = E.conv2d_forward(xc, wc, None, E.ConvSpec(3, 3, 3, padding=1, groups=3))
print("two identical calls, bitwise equal:", np.array_equal(a, b))

"""Reference moving average: y[t] = mean x[t - w/2 .. t + ceil(w/2) - 1], clipped at the edges."""
import sys

import numpy as np

import tsd

w = int(sys.argv[1])
mv, rate, _, _ = tsd.read(sys.argv[2])
n = len(mv)
c = np.concatenate([[0.0], np.cumsum(mv)])
t = np.arange(n)
lo = np.maximum(t - w // 2, 0)
hi = np.minimum(t + (w + 1) // 2, n)
tsd.write_float(sys.argv[3], (c[hi] - c[lo]) / (hi - lo), rate)

"""External denoiser that returns its input unchanged (same sample format)."""
import sys

import tsd

_, rate, fmt, data = tsd.read(sys.argv[1])
tsd.write_raw(sys.argv[2], data, rate, fmt)

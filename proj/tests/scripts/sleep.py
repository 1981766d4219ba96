"""External denoiser that never finishes in time."""
import time

time.sleep(60)

# FFTKF - spectrally shaped Kalman filtering for differentially private optimization
"""
Tools (FFT, masks, privacy, accounting, filtering, problems) and the
experiment pipeline built on them.
"""

__version__ = "0.1.0"

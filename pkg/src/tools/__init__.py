# Numerical kernels: FFT and masks, privacy, accounting, Kalman filter, problems

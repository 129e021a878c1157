"""Hot numeric kernels: numba-jitted loops with numpy fallbacks.

See :mod:`fusefield.accel` for how the backend is selected.
"""

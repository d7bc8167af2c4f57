"""Desk-scale verification toolkit for dynamical mass generation in the
two-dimensional large-N sigma model.

Modules:
    model      -- physical constants and the mass-gap equation
    kernels    -- regulated position-space kernels (propagator, bubble, ...)
    regions    -- small/large-field decomposition and security corridors
    operators  -- discretized operator layer and Fredholm determinants
    covariance -- configuration-dependent Gaussian covariances
    forests    -- forest / Mayer expansion combinatorics
    twopoint   -- Monte Carlo two-point function and decay-rate fit
    cli        -- command-line orchestrator
"""

__version__ = "0.1.0"

"""Analysis toolkit for a cosmic-photon-driven Bell test.

Modules
-------
polytopes   local and no-signaling polytopes, ML no-signaling fit
pbr         prediction-based-ratio scores and blocked p-value bounds
chstats     CH statistic, no-signaling Z-tests, bias and efficiency bookkeeping
qsim        quantum forward model, Eberhard optimization, trial sampling
cosmicrng   photon arrival times to random bits
spacetime   star geometry, spacelike margins and lookback times
pipeline    config-driven commands and JSON reports
"""

__version__ = "0.1.0"

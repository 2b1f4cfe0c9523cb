"""doseopt: reliable off-policy learning for continuous dosage combinations.

The package covers the full pipeline on observational data with
multi-dimensional continuous treatments:

- ``autodiff``   reverse-mode tape engine and Adam, float64 numpy
- ``splines``    clamped B-spline bases and tensor products
- ``synthgen``   semi-synthetic data generator with a known ground truth
- ``dcnet``      varying-coefficient dose-response network (+ MLP baseline)
- ``gps_flow``   conditional normalizing-flow density of dosages given x
- ``policy``     constrained policy learning with per-sample multipliers
- ``evaluation`` regret benchmarks, robustness sweeps, surface grids
- ``cli``        command-line front end over JSON configs
"""

__version__ = "0.1.0"

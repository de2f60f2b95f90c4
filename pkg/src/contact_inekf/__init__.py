"""Contact-aided invariant EKF with learned contact velocity covariances.

Subpackages:

- :mod:`contact_inekf.liegroup` -- SO(3)/block-group math and the tangent layout
- :mod:`contact_inekf.robot` -- kinematic robot model, IK, candidate sampling
- :mod:`contact_inekf.tape` -- reverse-mode autodiff tape
- :mod:`contact_inekf.filter` -- the differentiable invariant EKF
- :mod:`contact_inekf.contactnet` -- learned contact covariance module
- :mod:`contact_inekf.sim` -- synthetic legged-robot data generator
- :mod:`contact_inekf.training` -- truncated-BPTT training loop
- :mod:`contact_inekf.evaluation` -- ATE / NEES metrics and classical baselines
- :mod:`contact_inekf.cli` -- batch command-line front end
"""

__version__ = "0.1.0"

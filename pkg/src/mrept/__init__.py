"""Conductivity and permittivity reconstruction from H+ maps.

Pipeline: direct formula (:mod:`mrept.recon_direct`), regularized
semi-elliptic initial guess (:mod:`mrept.recon_init`) and adjoint Newton
refinement (:mod:`mrept.recon_newton`), with synthetic data from
:mod:`mrept.phantom` and :mod:`mrept.forward`.
"""

__version__ = "0.1.0"

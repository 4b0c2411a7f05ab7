"""Effective interface laws for fluid flow through thin periodic elastic membranes.

Modules: :mod:`geometry` (reference cell and macro domain), :mod:`grid`
(staggered operators, Q1 mesh), :mod:`linsolve`, :mod:`cell_stokes`,
:mod:`cell_elastic`, :mod:`macro` (coupled transient solver), :mod:`verify`
(oracles) and :mod:`cli`.
"""

from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]

"""Two-scale (FE2) finite-element solver with reduced-order RVE models.

Modules
-------
mesh       Tri6 meshes of the macro beam and of the perforated unit cell
materials  small-strain constitutive models with consistent tangents
rve        unit-cell boundary value problem and homogenization
rom        POD basis and Galerkin-reduced RVE
hyper      empirical cubature (hyper-integration)
training   surrogate fit, strain clustering and training trajectories
fe2        macro driver for the four coupling methods
pipeline   offline/online stages behind the ``fe2rom`` command
"""
__version__ = '0.1.0'

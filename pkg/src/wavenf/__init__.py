"""Normal-form engine and numerical laboratory for the nonlinear wave
equation u_tt = u_xx - (m + M_xi) u + eps u^3 with Dirichlet boundary
conditions, at finite mode truncation."""

__version__ = "0.1.0"

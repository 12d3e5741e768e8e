"""Why the full complex chaos is needed.

Two exact symmetries, checked numerically:

1. Dyadic imaginary cascade: shifting one weight X_I by 2pi/beta leaves every
   cell value M unchanged, yet moves the summed field A by exactly 2pi/beta on I.
   The phase only sees A modulo 2pi/beta, so local information is lost.
2. Gaussian field on the square: Gamma -> -Gamma leaves Re mu untouched while the
   gradient pairing <d_1 Gamma, f> flips sign. Any estimator fed with Re mu alone
   returns the same number for both fields, so it cannot track the pairing.

Run:  python demos/phase_ambiguity.py
"""

import numpy as np

from imchaos import ChaosParams, TestFunction, build_cascade, build_chaos, build_grid, reflection_witness, shift_cascade_weight
from imchaos.chaos import cell_span
from imchaos.estimator import REGULARIZED, EstimatorConfig, HEstimator
from imchaos.covariance import GFFSquare, SpectralTruncation
from imchaos.sampler import grad_pairing, replica_streams, sample_gff_spectral

beta = 1.0

print("-- cascade --")
c = build_cascade(12, 1.0, beta, seed=1)
level, index = 4, 5
for amount, label in ((2 * np.pi / beta, "2pi/beta"), (np.pi / beta, "pi/beta")):
    c2 = shift_cascade_weight(c, (level, index), amount)
    dA = (c2.A - c.A)[cell_span(level, index, c.levels)]
    print(f"shift by {label:8s}: max |M' - M| = {np.max(np.abs(c2.M - c.M)):.2e}, A' - A on I = {dA.mean():.6f}")

print("\n-- reflection --")
g = build_grid(2, 128)
J = 64
tf = TestFunction((0.5, 0.5), 0.09)
fields = sample_gff_spectral(g, J, replica_streams(3, 0, 400))
rep = reflection_witness(fields, ChaosParams(beta), tf)
print(f"max |Re mu(G) - Re mu(-G)| = {rep.max_real_diff:.1e}")
print(f"max |T(G) + T(-G)|         = {rep.antisymmetry_gap:.1e}   (typical |T| = {np.median(np.abs(rep.pairing)):.3f})")

# the estimator on the full chaos vs on its real part
cfg = EstimatorConfig(beta, tf, (0.2, 0.1), weight=REGULARIZED)
est = HEstimator(g, GFFSquare(), SpectralTruncation(J), cfg)
mu = build_chaos(fields, beta).values
T = grad_pairing(fields, tf)
H_full = est(mu)[:, -1]
H_real = est(mu.real.astype(complex))[:, -1]
H_real_ref = est(build_chaos(fields.negated(), beta).values.real.astype(complex))[:, -1]
print(f"H(Re mu) identical under reflection: {np.array_equal(H_real, H_real_ref)}")


def corr(H, T):
    """Modulus of the complex correlation between H and T."""
    H = H - H.mean()
    T = T - T.mean()
    return abs(np.mean(np.conj(H) * T)) / np.sqrt(np.mean(abs(H) ** 2) * np.mean(T**2))


# a functional of Re mu is even in Gamma while T is odd, so their correlation
# vanishes and no rescaling of it can get below relative error 1
print(f"|corr(H, T)| with full mu: {corr(H_full, T):.3f}")
print(f"|corr(H, T)| with Re mu:   {corr(H_real, T):.3f}")

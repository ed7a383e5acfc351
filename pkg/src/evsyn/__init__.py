"""Evidence synthesis to cost-effectiveness pipeline.

Reconstructs patient-level survival data from digitized Kaplan-Meier curves,
estimates hazard ratios, fits Bayesian meta-analytic models (including a
bivariate model that predicts unreported effects), composes indirect
comparisons, and drives probabilistic two- and three-state Markov cohort
models producing ICER, net-benefit, and CEAC outputs.
"""

__version__ = "0.1.0"

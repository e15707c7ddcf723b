"""CutFEM forward solver for EEG on level-set head models.

The package computes scalp electrode potentials induced by dipolar brain
sources.  Tissue compartments are described by level sets over a regular
hexahedral background mesh; cut cells are decomposed into
single-compartment snippets, compartments are coupled weakly with
Nitsche-type interface terms, small cut supports are stabilised with a
ghost penalty, and lead fields are computed through a transfer-matrix
approach.  Concentric-sphere models come with a semi-analytic series
reference used for validation.
"""

__version__ = "0.1.0"

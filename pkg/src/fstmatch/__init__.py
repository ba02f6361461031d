"""Grid-level Shapley explanations for binary real/fake classifiers.

Submodules:

* ``numerics``   cosine similarity, unit normalisation, rank AUC, seeded streams
* ``game``       image + scorer as a coalition game over an L x L grid
* ``shapley``    exact and permutation-sampled attribution, axiom checks
* ``fstmetrics`` relevance masks, Q, threshold-averaged Q, compression stability
* ``synthworld`` synthetic fake/source/target universe with a planted artifact
* ``nets``       small numpy MLP stack with analytic gradients
* ``fstnet``     disentangling detector with pair-verification heads
* ``harness``    configs, experiment pipelines, reports, external scorers, CLI
"""

__version__ = "0.1.0"

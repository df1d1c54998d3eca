"""replab: a desk-scale lab for comparing representation-pretraining
objectives for multitask imitation on synthetic latent linear MDPs."""

__version__ = "0.1.0"

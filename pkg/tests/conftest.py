import numpy as np

from gazekit import eyesim as es
from gazekit import pipeline as pl


def gen_batch(n_persons, spp, seed, **cfg_kw):
    """Simulate a small population and normalize it; returns
    (samples, arrays, normalized batch)."""
    cfg = es.SimConfig(
        n_persons=n_persons, samples_per_person=spp, seed=seed, **cfg_kw
    )
    samples, _ = es.generate_samples(cfg)
    arrays = pl.build_arrays(samples)
    return samples, arrays, pl.normalize_batch(arrays)


def perturbed_params(seed, arch, scale=0.3):
    """Initialized parameters pushed off the zero-final-layer point, for
    tests that need a generic operating point."""
    from gazekit import diffnet as dn

    params = dn.init_params(seed, arch)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed + 1)))
    return {k: v + rng.normal(scale=scale, size=v.shape) for k, v in params.items()}

"""Shared fixtures-in-plain-python for the test suite."""
import numpy as np

import advdistill as ad


def perfect_teacher_from_templates(templates, scale=60.0):
    """Linear nearest-template classifier: logits_c = 2s*t_c.x - s*||t_c||^2.

    With class supports separated in L2, a large enough scale makes it
    arbitrarily confident and exactly correct on every sample (and on every
    point closer to its own template than to any other).
    """
    flat = templates.reshape(len(templates), -1)
    w = (2 * scale * flat).T
    b = -scale * (flat**2).sum(axis=1)
    model = ad.Model(ad.ArchSpec("linear", templates.shape[1:], len(templates)), init_seed=0)
    model.set_params({"1.w": w, "1.b": b})
    return model


def separable_blob_spec(eps=8 / 255, noise=0.05, slack=0.04, **kw):
    """Blob spec whose class supports keep an L-inf gap larger than 2*eps."""
    defaults = dict(n_train=256, n_test=64, classes=2, shape=(2,),
                    separation=2 * eps + 2 * noise + slack,
                    noise_uniform=noise, noise_gauss=0.0, seed=11)
    defaults.update(kw)
    return ad.DatasetSpec(**defaults)

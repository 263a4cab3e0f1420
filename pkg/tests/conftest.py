"""Shared helpers: render seeded training sets and fit models from templates."""

import numpy as np

from ism3d.codebook import cluster_rnn
from ism3d.model import TrainingParams, TrainingSample, train
from ism3d.synthgen import Placement, SceneSpec, render_scene


def training_scene_spec(template, class_id, rng, width=320, height=240,
                        clutter=0, clutter_noise=0.5, descriptor_jitter=0.0,
                        scale_jitter=0.0, depth_jitter=0.02,
                        depth_range=(1.0, 2.5)):
    margin_x = template.width / 2 + 8
    margin_y = template.height / 2 + 8
    return SceneSpec(
        width=width, height=height,
        placements=(Placement(
            class_id,
            (float(rng.uniform(margin_x, width - margin_x)),
             float(rng.uniform(margin_y, height - margin_y))),
            1.0,
            float(rng.uniform(*depth_range))),),
        clutter_count=clutter, clutter_noise=clutter_noise,
        descriptor_jitter=descriptor_jitter, scale_jitter=scale_jitter,
        depth_jitter=depth_jitter, seed=int(rng.integers(1 << 31)))


def make_training_samples(templates, n_per_class, seed, **scene_kwargs):
    rng = np.random.default_rng(seed)
    samples = []
    for template in templates:
        for _ in range(n_per_class):
            spec = training_scene_spec(template, template.class_id, rng,
                                       **scene_kwargs)
            scene = render_scene(spec, templates)
            samples.append(TrainingSample(class_id=template.class_id,
                                          mask=scene.masks[0],
                                          features=scene.features))
    return samples


def fit_model(templates, n_per_class, seed, t_cluster=0.8, t_match=0.8,
              class_names=None, **scene_kwargs):
    samples = make_training_samples(templates, n_per_class, seed, **scene_kwargs)
    names = class_names or [f"class{t.class_id}" for t in templates]
    descriptors = np.vstack([s.features.descriptors for s in samples])
    codebook = cluster_rnn(descriptors, t_cluster, names)
    return train(samples, codebook, TrainingParams(t_match=t_match)), samples

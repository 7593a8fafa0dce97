"""Probabilities drift under bottleneck noise; the ranking of foreground pixels does not.

Trains a phase-1 model on clean synthetic scenes, then looks at shifted
target scenes. For every perturbation draw it reports how many true
foreground pixels flip across the 0.5 probability threshold, next to the
Spearman correlation of foreground log-odds against the clean pass.

    python3 demos/rank_stability.py [iterations]
"""

import sys

import numpy as np

from rankseg.evolve import EvolutionConfig, init_phase1, train_phase
from rankseg.hints import null_hints
from rankseg.rankcore import PerturbConfig, perturbed_probabilities, probs_to_logodds, spearman
from rankseg.segnet import SegNet, SegNetConfig
from rankseg.synthshift import SceneSpec, ShiftSpec, apply_shift, gen_scene

iters = int(sys.argv[1]) if len(sys.argv) > 1 else 400
scene = SceneSpec(seed=0)
shift = ShiftSpec("gamma", 1.0 / 3.0, seed=0)

train = [gen_scene(scene, i) for i in range(40)]
images = np.stack([im for im, _ in train])
labels = np.stack([lab for _, lab in train])
print(f"training a phase-1 model for {iters} iterations ...")
cfg = EvolutionConfig(iters_per_phase=iters)
net = train_phase(SegNet(SegNetConfig(3)), init_phase1(images, labels, 3), cfg).net

perturb = PerturbConfig()
print(f"{'image':>5} {'fg px':>6} {'mean flips':>10} {'median rho':>10}")
for i in range(40, 48):
    image, label = gen_scene(scene, i)
    image = apply_shift(image, shift, i)
    clean, noisy = perturbed_probabilities(net, image, null_hints(3, *label.shape), perturb, seed=i)
    fg = np.stack([label == c + 1 for c in range(3)])
    clean_pos = clean[0, 1:] > 0.5
    flips = [int((clean_pos != (p[0, 1:] > 0.5))[fg].sum()) for p in noisy]
    s_clean = probs_to_logodds(clean[0, 1:])
    rho = [spearman(s_clean, probs_to_logodds(p[0, 1:])) for p in noisy]
    print(f"{i:>5} {int(fg.sum()):>6} {np.mean(flips):>10.1f} {np.median(rho):>10.3f}")

"""The two consistency properties, plus negative controls that must fail.

Exchangeability: permuting a task's target points permutes its predictions.
Marginalization: deleting target points leaves the others' densities alone.
Both hold exactly for this model family because targets never attend to each
other. The controls break that on purpose.
"""
import numpy as np

from hnp.episodes import GpConfig, sample_gp_episode
from hnp.eval import as_float64, exchangeability_check, finite_diff_gradcheck, marginalization_check
from hnp.models import ModelConfig, build_model

model = build_model(ModelConfig(), seed=0)
ep = sample_gp_episode(GpConfig(), np.random.default_rng(3))

for name, check in (("exchangeability", exchangeability_check), ("marginalization", marginalization_check)):
    rep = check(model, ep, trials=10)
    print(f"{name:16s} max rel err {rep['max_rel_err']:.1e}  {'PASS' if rep['pass'] else 'FAIL'}")

# Shuffle target inputs but not labels: the check has to notice.
rep = exchangeability_check(model, ep, trials=10, break_alignment=True)
print(f"{'misaligned perm':16s} max rel err {rep['max_rel_err']:.1e}  {'PASS' if rep['pass'] else 'FAIL'} (expected FAIL)")


class BatchCoupled:
    """Shifts every mean by the average target input, so points see each other."""

    def __init__(self, inner):
        self.inner, self.cfg = inner, inner.cfg

    def predict(self, batch, rng, n_z=None, n_w=None):
        out = self.inner.predict(batch, rng, n_z, n_w)
        for m, tp in enumerate(out.tasks):
            tp.mean = tp.mean + batch.tx[m, :batch.n_target[m], 0].mean()
        return out


rep = marginalization_check(BatchCoupled(as_float64(model)), ep, trials=10)
print(f"{'coupled targets':16s} max rel err {rep['max_rel_err']:.1e}  {'PASS' if rep['pass'] else 'FAIL'} (expected FAIL)")

print()
for comp in ("encoder", "z_inference", "w_inference", "decoder"):
    rep = finite_diff_gradcheck(comp, mode="regression")
    print(f"gradcheck {comp:11s} max rel err {rep['max_rel_err']:.1e}  {'PASS' if rep['pass'] else 'FAIL'}")

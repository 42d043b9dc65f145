"""
Finite-difference check of the whole model
============================================

Every trainable tensor of a tiny float64 model is perturbed entry by entry
and the central difference is compared with the backward pass.  Takes a
minute or two on one core.
"""

# %%
from aquila.gradcheck import gradcheck

report = gradcheck(seed=0)
for line in report.lines()[:8]:
    print(line)
print("...")
print(report.lines()[-1])

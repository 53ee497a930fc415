"""strokepred: post-stroke outcome prediction pipeline at desk scale.

Synthesizes a cohort of labeled brain volumes with a known ground-truth
outcome rule, renders stitched / ROI / glyph-hybrid 2D images, trains a
from-scratch lightweight CNN plus logistic and fusion baselines under a
sealed lock-box protocol, and explains predictions with a perturbation-based
ROI-importance engine.
"""

__version__ = "0.1.0"

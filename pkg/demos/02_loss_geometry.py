"""The two geometric terms on hand-placed embeddings.

    python3 demos/02_loss_geometry.py

L_pd is minus the mean distance between category centers (times the margin);
pushing it down spreads categories apart. L_ot is the score-weighted mean
distance of each token to its own center; good tokens are pulled in hard,
score-0 tokens not at all.
"""
import numpy as np

from pco import autodiff as ad
from pco.autodiff import Tape
from pco.loss import compute_centers, ordinal_tightness, phonemic_distinction

# two categories in 2-D, three tokens each
emb = np.array([[1.0, 0.1], [0.9, -0.2], [0.2, 1.0],     # category 0, last token is off
                [0.0, 1.0], [-0.1, 0.9], [0.1, 1.1]])    # category 1
ids = np.array([0, 0, 0, 1, 1, 1])
scores = np.array([2.0, 2.0, 0.0, 2.0, 1.0, 2.0])

cm = compute_centers(emb, ids)           # tokens are unit-normalized first
print("centers\n", cm.centers.value.round(4))
print("L_pd", phonemic_distinction(cm).item())
print("L_ot", ordinal_tightness(emb, ids, scores, None, cm).item())

# two orthogonal unit centers sit sqrt(2) apart, so L_pd = -sqrt(2)
unit = compute_centers(np.eye(2), np.array([0, 1]), normalize=False)
print("\northogonal unit centers: L_pd =", phonemic_distinction(unit).item(), " -sqrt(2) =", -np.sqrt(2))

# gradients: which way does each term move each token?
for name, term in [("L_pd", lambda t: phonemic_distinction(compute_centers(t, ids))),
                   ("L_ot", lambda t: ordinal_tightness(t, ids, scores, None, compute_centers(t, ids)))]:
    tape = Tape()
    x = tape.leaf(emb)
    tape.backward(term(x))
    print(f"\n-grad {name} (descent direction per token)")
    print((-tape.grad(x)).round(3))

# the score-0 token (row 2) gets no pull from L_ot of its own, only the
# indirect effect of moving its center
print("\nscore-0 token distance to its center:",
      float(np.linalg.norm(cm.tokens.value[2] - cm.centers.value[0])))

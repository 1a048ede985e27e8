"""How the temperature turns per-environment ATEs into sampling weights."""
import numpy as np

from cfdt.data import softmax_weights

ates = np.array([0.0, -0.05, -0.3, -0.9, -1.91])
print("ATE      ", np.array2string(ates, precision=2))
for beta in (0.0, 1.0, 2.0, 5.0, 20.0):
    w = softmax_weights(ates, beta)
    print(f"beta={beta:<5}", np.array2string(w, precision=4, suppress_small=True))

# beta = 0 is plain uniform sampling; large beta keeps only the least affected environments

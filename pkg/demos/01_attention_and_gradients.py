"""A tour of the tensor core: tape gradients, attention masks, a gradient check.

Run:  python demos/01_attention_and_gradients.py
"""
import numpy as np

from outfitforge import tensor_core as tc

rng = np.random.default_rng(0)

# --- reverse mode on a tiny expression --------------------------------------
# f(W) = sum(relu(x W)); the gradient w.r.t. W is x^T (x W > 0).
x = rng.normal(size=(3, 4))
params = {"W": rng.normal(size=(4, 2))}
value, grads = tc.value_and_grad(lambda P: tc.relu(tc.Tensor(x) @ P["W"]).sum(), params)
by_hand = x.T @ (x @ params["W"] > 0).astype(float)
print("f =", round(value, 4))
print("tape gradient matches hand derivation:", np.allclose(grads["W"], by_hand))

# --- softmax: max-shifted, and masked entries are exactly zero -------------
logits = np.array([1000.0, 1001.0, 999.0])
print("softmax of huge logits:", tc.softmax(logits).round(4))
print("masked softmax:", tc.softmax(np.array([1.0, 2.0, 3.0]), mask=np.array([True, False, True])).round(4))

# --- attention with and without a causal mask -------------------------------
cfg = tc.AttentionConfig(model_dim=4, num_heads=2)
P = tc.init_attention(rng, "mh", 4)
P = {k.split(".")[-1]: v for k, v in P.items()}
seq = rng.normal(size=(5, 4))
_, w_full = tc.multi_head_attention(seq, seq, seq, cfg, P, return_weights=True)
_, w_causal = tc.multi_head_attention(seq, seq, seq, tc.AttentionConfig(4, 2, causal=True), P,
                                      return_weights=True)
print("head 0 weights, bidirectional:\n", w_full.data[0].round(2))
print("head 0 weights, causal (upper triangle is exactly 0):\n", w_causal.data[0].round(2))

# --- an encoder layer and a finite-difference check of its gradients --------
enc = tc.init_encoder_layer(rng, "enc", 4, 16)
# a sum of squares keeps the layer-norm outputs from cancelling in the loss
def loss(Q):
    h = tc.encoder_layer(tc.Tensor(seq), Q, "enc", cfg)
    return tc.tsum(h * h)


err = tc.grad_check(loss, enc)
print(f"encoder layer: max relative gradient error {err:.2e}")

# One LAMB step on a scalar, from the update rule written out by hand,
# evaluated with 40-digit decimals.
from decimal import Decimal as D, getcontext
getcontext().prec = 40

def step(w, g, lr, b1=D("0.9"), b2=D("0.999"), eps=D("1e-6"), wd=D("0.01")):
    m = (1 - b1) * g
    v = (1 - b2) * g * g
    m_hat = m / (1 - b1)
    v_hat = v / (1 - b2)
    r = m_hat / (v_hat.sqrt() + eps) + wd * w
    trust = abs(w) / abs(r)
    return w - lr * trust * r, m, v, trust

for w0, g in [("0.5", "1"), ("-0.25", "1")]:
    w, m, v, trust = step(D(w0), D(g), D("0.001"))
    print(w0, g, "w", w, "m", m, "v", v, "trust", trust)

# Group attention on a hand-built group: which region of the target is
# least like anything in the similar images?
import numpy as np

from gdiscap.gma import GmaParams, distinctive_attention

# target has 3 regions; regions 0 and 1 also show up in the other images
target = np.array([[1.0, 0.0, 0.0],
                   [0.0, 1.0, 0.0],
                   [0.0, 0.0, 1.0]])   # region 2 is the odd one out
similar = [np.array([[1.0, 0.1, 0.0], [0.0, 1.0, 0.1]]),
           np.array([[0.9, 0.0, 0.1]])]

res = distinctive_attention(target, similar, GmaParams(omega=1.0, bias=0.5))

for k, r in enumerate(res.similarity):
    print(f"cosine similarity to image {k + 1}:\n{np.round(r.data, 3)}")
print("max over each similar image's regions:", [np.round(r.data, 3) for r in res.summary])
print("distinctiveness D:", np.round(res.distinctiveness.data, 3))  # sums to 1
print("attention A = omega*D + b:", np.round(res.attention.data, 3))
print("most distinctive region:", int(np.argmax(res.attention.data)))

# omega scales the contrast, b keeps every region partly visible
for omega, bias in [(0.0, 1.0), (1.0, 0.0), (3.0, 0.2)]:
    a = distinctive_attention(target, similar, GmaParams(omega, bias)).attention.data
    print(f"omega={omega} b={bias}: A={np.round(a, 3)}")

"""Masking schedules: how many tokens are revealed after each iteration.

The linear schedule reveals at a constant rate; the cosine schedule is
conservative early (few, high-confidence commitments) and accelerates later
once context has accumulated. Cosine at inference time pairs well with
linear at training time.
"""

from maskgrid.masking import Schedule, keep_counts, tau

T, n = 16, 64
print(f"revealed tokens after each of T={T} iterations, n={n}:\n")
print("iter  linear  cosine   (bar = cosine)")
lin = keep_counts(T, n, Schedule.LINEAR)
cos = keep_counts(T, n, Schedule.COSINE)
for t in range(1, T + 1):
    bar = "#" * (cos[t - 1] * 40 // n)
    print(f"{t:>4}  {lin[t - 1]:>6}  {cos[t - 1]:>6}   {bar}")

print("\ntau(x) at x = t/T:")
for t in (4, 8, 12, 16):
    x = t / T
    print(f"  x={x:.2f}  linear {tau(x, Schedule.LINEAR):.3f}  "
          f"cosine {tau(x, Schedule.COSINE):.3f}")

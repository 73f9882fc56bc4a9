"""
Average accuracy and performance drop
=====================================

AA is the mean over sessions, PD is first minus last. Both are rounded
half-up to two decimals only when printed.
"""

from pillfscil.metrics import average_accuracy, performance_drop, round_half_up

rows = {
    "FACT": [96.22, 92.84, 89.98, 89.31, 87.80, 86.72, 87.09, 86.67, 84.73],
    "ALICE": [89.20, 85.84, 83.40, 81.46, 78.73, 77.48, 76.76, 76.13, 74.91],
    "top row": [96.38, 94.54, 92.74, 92.03, 91.04, 90.41, 90.68, 90.66, 89.59],
}
for name, accs in rows.items():
    print("%-8s AA=%.2f PD=%.2f" % (name, round_half_up(average_accuracy(accs)),
                                    round_half_up(performance_drop(accs))))

# binary floats sit just below some halves; rounding uses the decimal repr
print(round(92.005, 2), round_half_up(92.005))

"""
Cost of the second handshake
============================

The second handshake adds two round trips and a few hundred bytes. Against
a 100 megabit download on a 10 Mbit/s link that is well under one percent
of the transfer time.
"""

from veil.bench import HUNDRED_MEGABITS, run_bench

report = run_bench(HUNDRED_MEGABITS, repeats=3, capacity_bps=10e6, delay_ms=10)

print(f"payload                {report.payload_bytes} bytes")
print(f"legacy transfer        {report.wall_time_legacy:.4f} s (virtual)")
print(f"masked transfer        {report.wall_time_masked:.4f} s (virtual)")
print(f"extra time             {report.extra_handshake_fraction:.3%}")
print(f"extra bytes / flights  {report.extra_handshake_bytes} / {report.extra_flights}")

###############################################################################
# The same arithmetic by hand: two extra round trips of 20 ms each, plus the
# extra bytes serialized at 10 Mbit/s.

rtt = 2 * 0.010
by_hand = 2 * rtt + report.extra_handshake_bytes * 8 / 10e6
print(f"by hand                {by_hand / report.wall_time_masked:.3%}")

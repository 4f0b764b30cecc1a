"""
Bounded storage and ordering overhead
=====================================

Miners keep only a partial consistent cut of the ledger. Plain LRU fills
the 20-block budget quickly; a cut limit C keeps storage near C blocks.
The second half sweeps chain count and chain length and prints the
messages each miner handles per committed chain event.
"""

from iotchain.simnet import GeneratorConfig, generate_scenario, run

base = generate_scenario(GeneratorConfig(), seed=0)
print("cut  mean bytes  peak bytes  saturated miners")
for cut in (1, 5, 10, 15, 20):
    m = run(base.with_(cut=cut), 60).metrics
    print(f"{cut:>3}  {m.mean_bytes():>10.1f}  {max(m.peak_bytes.values()):>10}  "
          f"{len(m.saturated_at):>16}")

# Rows: miners per chain. Columns: concurrent chains.
sizes = (2, 6, 10)
print("\nMER   " + "".join(f"k={k:<6}" for k in sizes))
for length in sizes:
    row = [run(generate_scenario(GeneratorConfig(30, k, length, length, 5), 0), 60).metrics.mean_mer()
           for k in sizes]
    print(f"L={length:<3} " + "".join(f"{v:<8.2f}" for v in row))

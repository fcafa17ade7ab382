"""cyclelab: a desk-scale lab for the self-adversarial attack in
cycle-consistent unpaired image translation."""

__version__ = "0.1.0"

"""Evidence gating toolkit for retrieval-grounded answers.

Decides whether an answer may be emitted, records why in a signed,
offline-verifiable receipt, and plans the statistical budgets the gates
depend on.
"""

__version__ = "0.1.0"

"""Learn when listeners seek novel music tastes.

Pipeline: ingest a listening log, cut it into sessions, discover tastes with
LDA, assign each session a taste, then learn one novel/familiar Q-learning
policy per user and evaluate it on held-out sessions.
"""

__version__ = "0.1.0"

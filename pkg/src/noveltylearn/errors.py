"""Exception hierarchy shared by every pipeline stage.

CLI exit codes are keyed off the ``category`` attribute, so each class maps to
one failure bucket.
"""

from __future__ import annotations


class NoveltyError(Exception):
    category = "error"
    exit_code = 1


# ingest / sessions
class MalformedLine(NoveltyError):
    category = "input"
    exit_code = 3

    def __init__(self, line_no: int, reason: str = "") -> None:
        self.line_no = line_no
        self.reason = reason
        msg = f"malformed line {line_no}"
        if reason:
            msg += f": {reason}"
        super().__init__(msg)


class EmptyInput(NoveltyError):
    category = "input"
    exit_code = 3


class UserTooSparse(NoveltyError):
    category = "data"
    exit_code = 4

    def __init__(self, user_id: str, n_sessions: int, minimum: int) -> None:
        self.user_id = user_id
        self.n_sessions = n_sessions
        self.minimum = minimum
        super().__init__(f"user {user_id!r} has {n_sessions} sessions (< {minimum})")


# lda
class InvalidK(NoveltyError):
    category = "config"
    exit_code = 2


class EmptyCorpus(NoveltyError):
    category = "data"
    exit_code = 4


class EmptyHeldout(NoveltyError):
    category = "data"
    exit_code = 4


class AllOutOfVocabulary(NoveltyError):
    category = "data"
    exit_code = 4


class BadTasteIndex(NoveltyError, IndexError):
    category = "data"
    exit_code = 4


# assignment / agent / eval / churn
class EmptySession(NoveltyError):
    category = "data"
    exit_code = 4


class TrajectoryTooShort(NoveltyError):
    category = "data"
    exit_code = 4


class NoEpisodes(NoveltyError):
    category = "data"
    exit_code = 4


class NoHeldout(NoveltyError):
    category = "data"
    exit_code = 4


class TooFewUsers(NoveltyError):
    category = "data"
    exit_code = 4


class EmptyGroup(NoveltyError):
    category = "data"
    exit_code = 4


# synth / cli
class BadConfig(NoveltyError):
    category = "config"
    exit_code = 2


class ConfigError(NoveltyError):
    category = "config"
    exit_code = 2


class MissingArtifact(NoveltyError):
    category = "artifact"
    exit_code = 5


class StaleArtifact(NoveltyError):
    category = "artifact"
    exit_code = 5

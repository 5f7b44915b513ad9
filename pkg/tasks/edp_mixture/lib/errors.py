"""Error types shared by the library, the tasks and the CLI.

Every error carries an upper-case ``code`` (e.g. ``LENGTH_MISMATCH``) and an
optional ``context`` dict with subject ids, file names and line numbers. The
subclass decides the process exit status used by the CLI.
"""


class EdpError(Exception):
    exit_code = 4

    def __init__(self, code, message, **context):
        self.code = code
        self.message = message
        self.context = context
        super().__init__(self.render())

    def render(self):
        text = '{}: {}'.format(self.code, self.message)
        path = self.context.get('path')
        line = self.context.get('line')
        if path is not None and line is not None:
            text += ' ({}:{})'.format(path, line)
        elif path is not None:
            text += ' ({})'.format(path)
        subject_id = self.context.get('subject_id')
        if subject_id is not None:
            text += ' [subject_id={}]'.format(subject_id)
        return text


class ConfigError(EdpError):
    exit_code = 2


class DataError(EdpError):
    exit_code = 3


class NumericError(EdpError):
    exit_code = 4

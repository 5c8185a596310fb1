class RailpanelError(Exception):
    """Error carrying a stable machine-readable ``code``.

    Codes are upper-case identifiers such as ``"NO_NEVER_TREATED"`` or
    ``"SCHEMA_ERROR"``; the CLI serializes them verbatim.
    """

    def __init__(self, code, message="", **context):
        self.code = code
        self.message = message or code
        self.context = context
        super().__init__(f"{code}: {self.message}")

    def to_dict(self):
        out = {"error": self.code, "message": self.message}
        out.update({k: v for k, v in self.context.items() if v is not None})
        return out

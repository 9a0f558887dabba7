__title__: str = "ciscic"
__version__: str = "1.0.0"
__authors__: str = "Jaymart, OseSem"

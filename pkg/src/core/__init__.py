"""
Core msprompt modules: command line, configuration, errors and training guard
"""

# UI package

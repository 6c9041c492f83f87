"""Template-instance margin loss toolkit: glyph similarity features, template
affinity and prior margins, margin softmax losses and a toy trainer."""

__version__ = "0.1.0"

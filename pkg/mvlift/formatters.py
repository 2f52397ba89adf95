# coding=UTF-8
"""Formatters are utilities for formatting metric values by adding HTML code or CSS classes"""
import numpy as np

DEFAULT_FLOAT_FORMATTER = u'mvlift.__default_float_formatter'


def gradient_format(value, limit1, limit2, c1, c2):
    def lerp_colour(c1, c2, t):
        t = min(max(t, 0.0), 1.0)
        return (int(c1[0] + (c2[0] - c1[0]) * t), int(c1[1] + (c2[1] - c1[1]) * t), int(c1[2] + (c2[2] - c1[2]) * t))
    c = lerp_colour(c1, c2, (value - limit1) / (limit2 - limit1))
    return fmt_color(fmt_milli(value), "rgb{}".format(str(c)))


def fmt_color(text, color):
    return u'<span style="color:{color}">{text}</span>'.format(color=color, text=str(text))


def fmt_milli(v):
    return u'{:.2f}'.format(v)


value_formatters = {
    u'mpjpe': (lambda v: gradient_format(v, 0, 200, (99, 200, 72), (209, 60, 75))),
    u'pa_mpjpe': (lambda v: gradient_format(v, 0, 200, (99, 200, 72), (209, 60, 75))),
    u't_root': (lambda v: gradient_format(v, 0, 500, (99, 200, 72), (209, 60, 75))),
    u'j2d': fmt_milli,
    u'j2d_centered': fmt_milli,
    DEFAULT_FLOAT_FORMATTER: lambda v: str(float('{:.5g}'.format(v))).rstrip('0').rstrip('.')
}


def fmt_row_severity(v):
    if np.isnan(v) or v <= 0.01:
        return "ignore"
    else:
        return "alert"


row_formatters = {
    u'mpjpe': fmt_row_severity,
    u'pa_mpjpe': fmt_row_severity,
    u't_root': fmt_row_severity,
}


def fmt(value, name):
    """Format `value` with the formatter registered for `name`, or as a short float."""
    if value is None or (isinstance(value, float) and np.isnan(value)):
        return ""
    if name in value_formatters:
        return value_formatters[name](value)
    if isinstance(value, (float, np.floating)):
        return value_formatters[DEFAULT_FLOAT_FORMATTER](float(value))
    return str(value)

# coding=UTF-8
"""Contains all templates used for generating the HTML evaluation report"""

from jinja2 import Environment, PackageLoader

# Initializing Jinja
pl = PackageLoader('mvlift', 'templates')
jinja2_env = Environment(lstrip_blocks=True, trim_blocks=True, loader=pl, autoescape=False)

# Mapping between template name and file
templates = {'wrapper': 'wrapper.html',
             'overview': 'overview.html',
             'metric_table': 'metric_table.html',
             'sequence_row': 'sequence_row.html',
             'curves': 'curves.html',
             }

# Mapping between metric column and its label in the report
metric_labels = {'t_root': 'T<sub>root</sub>',
                 'mpjpe': 'MPJPE',
                 'pa_mpjpe': 'PA-MPJPE',
                 'j2d': 'J2D',
                 'j2d_centered': 'J2D<sup>C</sup>',
                 }


def template(template_name):
    """Return a jinja template ready for rendering.

    Parameters
    ----------
    template_name: str, the name of the template as defined in the templates mapping

    Returns
    -------
    The Jinja template ready for rendering
    """
    return jinja2_env.get_template(templates[template_name], globals={'metric_labels': metric_labels})


messages = dict()
messages['pa_above'] = u'<code>{seq_id}</code> has PA-MPJPE above MPJPE <span class="label label-warning">Warning</span>'
messages['non_converged'] = u'3D recovery of <code>{seq_id}</code> did not converge <span class="label label-warning">Warning</span>'

message_row = u'<li>{message}</li>'

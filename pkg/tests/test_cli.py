import csv
import io
import json

import pytest
from click.testing import CliRunner

import app
from app import cli, default_augment, parse_conventions
from core.arch import resolve_spec
from core.errors import ConfigurationError
from harness.trainer import EpochRecord, History
from models import PUBLISHED_CONVENTIONS


@pytest.fixture
def runner():
    return CliRunner(mix_stderr=False)


class TestConventions:
    def test_published(self):
        assert parse_conventions('published') == PUBLISHED_CONVENTIONS
        assert parse_conventions('no-bn,no-attention-bias') == PUBLISHED_CONVENTIONS

    def test_unknown(self):
        with pytest.raises(ConfigurationError):
            parse_conventions('no-such-thing')


class TestDescribeAndCost:
    def test_describe_csv(self, runner):
        result = runner.invoke(cli, ['describe', 'antnet_cifar_g2', '--format', 'csv'])
        assert result.exit_code == 0
        lines = result.stdout.splitlines()
        assert len(lines) == 12
        assert lines[0].startswith('name,op,in_shape,out_shape')

    def test_describe_text(self, runner):
        result = runner.invoke(cli, ['describe', 'antnet_imagenet_g2'])
        assert result.exit_code == 0
        assert 'ant7' in result.stdout and 'antnet_imagenet_g2' in result.stdout

    def test_describe_blocks(self, runner):
        result = runner.invoke(cli, ['describe', 'antnet_cifar_g2', '--blocks', '--format', 'json'])
        rows = json.loads(result.stdout)['rows']
        assert sum(1 for row in rows if row['op'] == 'antblock') == 17

    def test_cost_csv(self, runner):
        result = runner.invoke(cli, ['cost', 'antnet_cifar_g2', '--format', 'csv'])
        assert result.exit_code == 0
        rows = list(csv.DictReader(io.StringIO(result.stdout)))
        assert result.stdout.splitlines()[0] == 'layer,op,out_shape,params,madds'
        assert sum(int(row['params']) for row in rows) == 2_254_035

    def test_cost_json_published(self, runner):
        result = runner.invoke(cli, ['cost', 'antnet_cifar_g2', '--conventions', 'published', '--format', 'json'])
        data = json.loads(result.stdout)
        assert data['totals'] == {'params': 2_211_492, 'madds': 73_350_464}
        assert data['conventions']['label'] == 'no-bn,no-attention-bias'

    def test_cost_text_footer(self, runner):
        result = runner.invoke(cli, ['cost', 'mobilenetv2_cifar', '--conventions', 'published'])
        assert 'total madds  91,270,144' in result.stdout

    def test_malformed_spec(self, runner, tmp_path):
        path = tmp_path / 'broken.json'
        path.write_text('{\n  "name": "broken",\n  oops\n}\n', encoding='utf-8')
        result = runner.invoke(cli, ['cost', str(path)])
        assert result.exit_code == 2
        assert result.stdout == ''
        assert 'line 3' in result.stderr

    def test_unknown_spec(self, runner):
        result = runner.invoke(cli, ['describe', 'no_such_spec'])
        assert result.exit_code == 2 and result.stdout == ''

    def test_unknown_convention(self, runner):
        result = runner.invoke(cli, ['cost', 'antnet_cifar_g2', '--conventions', 'bogus'])
        assert result.exit_code == 2 and result.stdout == ''


class TestCompare:
    def test_json_deltas(self, runner):
        result = runner.invoke(cli, ['compare', 'mobilenetv2_cifar', 'antnet_cifar_g2', '--format', 'json'])
        assert result.exit_code == 0
        data = json.loads(result.stdout)
        assert data['reference'] == 'mobilenetv2_cifar'
        rows = {row['model']: row for row in data['rows']}
        assert abs(rows['antnet_cifar_g2']['delta_madds_pct'] + 19.63) < 0.01
        assert rows['mobilenetv2_cifar']['delta_params_pct'] == 0.0

    def test_explicit_reference(self, runner):
        result = runner.invoke(cli, ['compare', 'antnet_cifar_g2', 'mobilenetv2_cifar',
                                     '--reference', 'mobilenetv2_cifar', '--format', 'json'])
        assert json.loads(result.stdout)['reference'] == 'mobilenetv2_cifar'

    def test_reduction_ablation_by_name(self, runner):
        result = runner.invoke(cli, ['compare', 'antnet_cifar_g1_r8', 'antnet_cifar_g1_r16', 'antnet_cifar_g1_r32',
                                     '--format', 'json'])
        assert result.exit_code == 0, result.stderr
        rows = {row['model']: row for row in json.loads(result.stdout)['rows']}
        assert (rows['antnet_cifar_g1_r8']['params'], rows['antnet_cifar_g1_r8']['madds']) == (3_505_188, 92_398_208)
        assert rows['antnet_cifar_g1_r16']['published_params'] == 3_000_000
        assert rows['antnet_cifar_g1_r32']['params'] == 2_661_732

    def test_unknown_reference(self, runner):
        result = runner.invoke(cli, ['compare', 'antnet_cifar_g2', '--reference', 'nope'])
        assert result.exit_code == 2


class TestFcrf:
    def test_grouped_without_attention_fails(self, runner):
        result = runner.invoke(cli, ['fcrf', 'dws_noattention_g2'])
        assert result.exit_code == 1
        data = json.loads(result.stdout)
        assert data['fcrf'] is False and data['witness'] == [0, 4]

    @pytest.mark.parametrize('name', ['conv_only', 'dws_attention_g2', 'antnet_cifar_g2'])
    def test_full(self, runner, name):
        result = runner.invoke(cli, ['fcrf', name])
        assert result.exit_code == 0
        assert json.loads(result.stdout)['fcrf'] is True

    def test_grid_file(self, runner, tmp_path):
        grid = tmp_path / 'grid.txt'
        runner.invoke(cli, ['fcrf', 'dws_noattention_g2', '--grid', str(grid)])
        lines = grid.read_text(encoding='utf-8').splitlines()
        assert len(lines) == 8 and all(len(line) == 8 and set(line) <= {'0', '1'} for line in lines)
        assert lines[0] == '11110000'

    def test_text_format(self, runner):
        result = runner.invoke(cli, ['fcrf', 'conv_only', '--format', 'text'])
        assert result.exit_code == 0 and result.stdout


class TestGradcheckCommand:
    def test_passes(self, runner):
        result = runner.invoke(cli, ['gradcheck', 'antnet_desk_3block', '--coords', '200'])
        assert result.exit_code == 0, result.stderr
        data = json.loads(result.stdout)
        assert data['passed'] is True and data['checked'] >= 200


class TestTrainCommand:
    def test_synthetic_run(self, runner, tmp_path):
        history = tmp_path / 'history.csv'
        checkpoint = tmp_path / 'model.ckpt'
        result = runner.invoke(cli, ['train', 'antnet_desk_3block', '--synth', '--epochs', '2', '--per-class', '4',
                                     '--batch-size', '6', '--history', str(history),
                                     '--checkpoint', str(checkpoint)])
        assert result.exit_code == 0, result.stderr
        assert history.read_text(encoding='utf-8') == result.stdout
        assert len(result.stdout.splitlines()) == 3
        assert checkpoint.stat().st_size > 0

    def test_zero_learning_rate(self, runner):
        result = runner.invoke(cli, ['train', 'antnet_desk_3block', '--synth', '--epochs', '3', '--per-class', '4',
                                     '--lr', '0', '--no-shuffle', '--batch-size', '12'])
        rows = list(csv.DictReader(io.StringIO(result.stdout)))
        losses = {float(row['loss']) for row in rows}
        assert len(rows) == 3 and len(losses) == 1

    def test_unreached_target(self, runner):
        result = runner.invoke(cli, ['train', 'antnet_desk_3block', '--synth', '--epochs', '1', '--per-class', '2',
                                     '--lr', '0', '--target-acc', '1.01'])
        assert result.exit_code == 1

    def test_missing_data_dir(self, runner, tmp_path):
        result = runner.invoke(cli, ['train', 'antnet_desk_3block', '--data-dir', str(tmp_path / 'nope')])
        assert result.exit_code == 2 and result.stdout == ''

    def test_bad_milestones(self, runner):
        result = runner.invoke(cli, ['train', 'antnet_desk_3block', '--synth', '--milestones', 'a,b'])
        assert result.exit_code == 2


class TestAugmentDefault:
    def test_real_cifar_shape(self):
        assert default_augment(resolve_spec('antnet_cifar_g2'), synth=False) is True

    def test_synthetic_or_small_inputs(self):
        assert default_augment(resolve_spec('antnet_cifar_g2'), synth=True) is False
        assert default_augment(resolve_spec('antnet_desk_g2'), synth=False) is False

    @pytest.mark.parametrize('flags, expected', [([], True), (['--no-augment'], False)])
    def test_train_on_cifar_files(self, runner, tmp_path, monkeypatch, flags, expected):
        record = bytes([0, 5]) + bytes(3072)
        (tmp_path / 'train.bin').write_bytes(record * 2)
        seen = {}

        def fake_train(network, dataset, cfg, eval_set=None, on_epoch=None):
            seen['augment'] = cfg.augment
            history = History()
            history.append(EpochRecord(0, cfg.lr_init, 1.0, 0.5))
            return history

        monkeypatch.setattr(app, 'train', fake_train)
        result = runner.invoke(cli, ['train', 'antnet_cifar_g2', '--data-dir', str(tmp_path), '--epochs', '1',
                                     *flags])
        assert result.exit_code == 0, result.stderr
        assert seen['augment'] is expected

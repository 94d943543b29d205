import pytest

from consistency_at.storage.sqlite_store import METRIC_COLUMNS


def metrics_row(epoch, pgd10=40.0):
    return {'epoch': epoch, 'lr': 0.1, 'train_adv_loss': 1.5, 'train_cons_loss': 0.2,
            'clean_acc': 70.0, 'pgd10_acc': pgd10}


def test_record_and_read_epochs(store):
    store.record_epoch(metrics_row(2))
    store.record_epoch(metrics_row(1))

    epochs = store.get_epochs()
    assert [row['epoch'] for row in epochs] == [1, 2]
    assert set(epochs[0]) == set(METRIC_COLUMNS)


def test_record_epoch_replaces_existing_row(store):
    store.record_epoch(metrics_row(1, pgd10=40.0))
    store.record_epoch(metrics_row(1, pgd10=45.0))

    epochs = store.get_epochs()
    assert len(epochs) == 1
    assert epochs[0]['pgd10_acc'] == 45.0


def test_truncate_epochs(store):
    for epoch in (1, 2, 3):
        store.record_epoch(metrics_row(epoch))
    store.truncate_epochs(1)
    assert [row['epoch'] for row in store.get_epochs()] == [1]


def test_metrics_frame_columns(store):
    assert list(store.metrics_frame().columns) == list(METRIC_COLUMNS)
    store.record_epoch(metrics_row(1))
    assert len(store.metrics_frame()) == 1


def test_checkpoint_registry(store):
    assert store.get_checkpoint('best') is None
    store.register_checkpoint('best', 3, 'runs/a/checkpoints/best.pt', 42.5, 'abc')
    store.register_checkpoint('best', 5, 'runs/a/checkpoints/best.pt', 44.0, 'abc')

    best = store.get_checkpoint('best')
    assert best['epoch'] == 5
    assert best['pgd10_acc'] == 44.0
    assert best['config_hash'] == 'abc'


def test_checkpoint_kind_is_checked(store):
    with pytest.raises(ValueError):
        store.register_checkpoint('latest', 1, 'x.pt', None, 'abc')


def test_evaluations_upsert(store):
    store.record_evaluation('best.pt', 'whitebox', [('clean_acc', 80.0), ('robust_acc/pgd20_eval', 50.0)])
    store.record_evaluation('best.pt', 'whitebox', [('clean_acc', 81.0)])
    store.record_evaluation('best.pt', 'unseen', [])

    assert store.get_evaluation('best.pt', 'whitebox') == {'clean_acc': 81.0, 'robust_acc/pgd20_eval': 50.0}
    assert store.get_evaluation('best.pt', 'unseen') == {}


def test_run_state(store):
    assert store.get_state('config_hash', 'missing') == 'missing'
    store.set_state('config_hash', 'abc')
    store.set_state('extra', {'epochs': [1, 2]})
    store.set_state('config_hash', 'def')

    assert store.get_state('config_hash') == 'def'
    assert store.get_state('extra') == {'epochs': [1, 2]}

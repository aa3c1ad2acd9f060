import numpy as np
import pytest

from radroute import audio, simworld
from radroute.audio import (AudioDataset, TrainConfig, build_dataset,
                            build_model, classify_stream, extract_features,
                            predict, slice_clip, train_classifier)
from radroute.dsp import AudioClip
from radroute.errors import NumericError
from radroute.simworld import TerrainClass, synth_audio


def clips(terrain, n, seed0=0, duration=0.5):
    return [synth_audio(terrain, duration, 44100.0, seed0 + i)
            for i in range(n)]


def two_class_dataset(n=3, representation="spectrogram"):
    return build_dataset(
        {TerrainClass.GRASS: clips(TerrainClass.GRASS, n),
         TerrainClass.GRAVEL: clips(TerrainClass.GRAVEL, n, seed0=100)},
        representation)


class TestSliceClip:
    def test_window_count_for_recording_session(self):
        # 15 min per class from each of 2 microphones at 0.5 s windows
        fs = 1000.0
        recording = AudioClip(np.zeros(int(900 * fs)), fs)
        per_mic = len(slice_clip(recording))
        assert per_mic == 1800
        assert 2 * per_mic == 3600  # per class, both microphones

    def test_partial_window_dropped(self):
        clip = AudioClip(np.zeros(22050 + 11025), 44100.0)
        assert len(slice_clip(clip)) == 1

    def test_windows_are_consecutive(self):
        clip = AudioClip(np.arange(44100, dtype=float), 44100.0)
        a, b = slice_clip(clip)
        assert a.samples[-1] + 1 == b.samples[0]


class TestBuildDataset:
    def test_shapes_and_balance(self):
        ds = two_class_dataset(n=3)
        assert len(ds) == 6
        assert ds.images.shape == (6, 1, 221, 50)
        counts = np.bincount(ds.labels)
        assert counts[int(TerrainClass.GRASS)] == 3
        assert counts[int(TerrainClass.GRAVEL)] == 3

    def test_single_class_rejected(self):
        with pytest.raises(ValueError):
            build_dataset({TerrainClass.GRASS:
                           clips(TerrainClass.GRASS, 2)}, "spectrogram")

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            build_dataset({}, "spectrogram")

    def test_short_clips_counted(self):
        short = AudioClip(np.zeros(1000), 44100.0)
        ds = build_dataset(
            {TerrainClass.GRASS: clips(TerrainClass.GRASS, 2) + [short],
             TerrainClass.GRAVEL: clips(TerrainClass.GRAVEL, 2)},
            "spectrogram")
        assert ds.skipped_short == 1
        assert len(ds) == 4

    def test_deterministic_order(self):
        a = two_class_dataset()
        b = two_class_dataset()
        np.testing.assert_array_equal(a.labels, b.labels)
        np.testing.assert_array_equal(a.images, b.images)

    def test_unknown_representation(self):
        with pytest.raises(ValueError):
            extract_features(clips(TerrainClass.GRASS, 1)[0], "cepstrum")


class TestFeatures:
    def test_standardized(self):
        img = extract_features(clips(TerrainClass.GRAVEL, 1)[0], "mel")
        assert abs(img.mean()) < 1e-9
        assert abs(img.std() - 1.0) < 1e-9

    def test_gain_invariance(self):
        clip = clips(TerrainClass.GRASS, 1)[0]
        half = AudioClip(clip.samples * 0.5, clip.sample_rate)
        a = extract_features(clip, "spectrogram")
        b = extract_features(half, "spectrogram")
        np.testing.assert_allclose(a, b, atol=1e-9)

    def test_representation_shapes(self):
        clip = clips(TerrainClass.GRASS, 1)[0]
        assert extract_features(clip, "spectrogram").shape == (221, 50)
        assert extract_features(clip, "mel").shape == (64, 50)
        assert extract_features(clip, "gammatone").shape == (32, 50)


class TestTraining:
    def test_learns_two_easy_classes(self):
        train = two_class_dataset(n=8)
        test = build_dataset(
            {TerrainClass.GRASS: clips(TerrainClass.GRASS, 3, seed0=500),
             TerrainClass.GRAVEL: clips(TerrainClass.GRAVEL, 3, seed0=600)},
            "spectrogram")
        model, log = train_classifier(train, TrainConfig(epochs=4))
        assert len(log.epoch_loss) == 4
        report = audio.evaluate(model, test)
        assert report["accuracy"] >= 0.9
        assert report["confusion"].sum() == len(test)

    def test_single_sample_overfits(self):
        ds = two_class_dataset(n=1)
        one = AudioDataset(images=ds.images[:1], labels=ds.labels[:1],
                           representation=ds.representation)
        model, log = train_classifier(
            one, TrainConfig(epochs=30, batch_size=1, learning_rate=0.1))
        assert log.epoch_accuracy[-1] == 1.0

    def test_deterministic(self):
        ds = two_class_dataset(n=2)
        m1, _ = train_classifier(ds, TrainConfig(epochs=1))
        m2, _ = train_classifier(ds, TrainConfig(epochs=1))
        for p1, p2 in zip(m1.params, m2.params):
            np.testing.assert_array_equal(p1, p2)

    def test_divergence_reported(self):
        ds = two_class_dataset(n=2)
        ds.images[0, 0, 0, 0] = np.nan  # poisons the loss on batch one
        with pytest.raises(NumericError):
            train_classifier(ds, TrainConfig(epochs=1, batch_size=len(ds)))

    def test_bad_config(self):
        with pytest.raises(ValueError):
            TrainConfig(learning_rate=0.0)
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)


@pytest.fixture(scope="module")
def model():
    ds = two_class_dataset(n=4)
    trained, _ = train_classifier(ds, TrainConfig(epochs=2))
    return trained


class TestPredictAndStream:
    def test_probabilities_sum_to_one(self, model):
        clip = clips(TerrainClass.GRASS, 1)[0]
        pred = predict(model, clip, "spectrogram")
        assert abs(pred.probabilities.sum() - 1.0) < 1e-9
        assert pred.terrain == int(np.argmax(pred.probabilities))

    def test_short_clip_rejected(self, model):
        with pytest.raises(ValueError):
            predict(model, AudioClip(np.zeros(1000), 44100.0), "spectrogram")

    def test_gain_invariant_class(self, model):
        clip = clips(TerrainClass.GRAVEL, 1)[0]
        half = AudioClip(clip.samples * 0.5, clip.sample_rate)
        a = predict(model, clip, "spectrogram")
        b = predict(model, half, "spectrogram")
        assert a.terrain == b.terrain

    def test_stream_rate_and_timestamps(self, model):
        stream = synth_audio(TerrainClass.GRASS, 10.0, 44100.0, 0)
        preds = classify_stream(model, stream, "spectrogram", start_time=3.0)
        assert len(preds) == 20
        times = [p.timestamp for p in preds]
        np.testing.assert_allclose(
            times, 3.0 + (np.arange(20) + 0.5) * 0.5, atol=1e-12)

    def test_stream_too_short(self, model):
        with pytest.raises(ValueError):
            classify_stream(model, AudioClip(np.zeros(100), 44100.0),
                            "spectrogram")


class StubModel:
    """Replays a fixed probability row per sample, in dataset order."""

    def __init__(self, probs):
        self.probs = probs
        self.cursor = 0

    def forward(self, x):
        out = self.probs[self.cursor:self.cursor + len(x)]
        self.cursor += len(x)
        return out


class TestEvaluate:
    def dataset(self, labels):
        labels = np.asarray(labels)
        return AudioDataset(images=np.zeros((len(labels), 1, 4, 4)),
                            labels=labels, representation="mel")

    def test_all_correct(self):
        labels = np.array([0, 1, 2, 0, 1, 2])
        report = audio.evaluate(StubModel(np.eye(3)[labels]),
                                self.dataset(labels))
        assert report["accuracy"] == 1.0
        assert np.trace(report["confusion"]) == 6

    def test_cyclic_shift_all_wrong(self):
        labels = np.array([0, 1, 2, 0, 1, 2])
        report = audio.evaluate(StubModel(np.eye(3)[(labels + 1) % 3]),
                                self.dataset(labels))
        assert report["accuracy"] == 0.0
        assert np.trace(report["confusion"]) == 0

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            audio.evaluate(StubModel(np.zeros((0, 3))), self.dataset([]))


class TestModelIo:
    def test_roundtrip(self, tmp_path):
        ds = two_class_dataset(n=2)
        model, _ = train_classifier(ds, TrainConfig(epochs=1))
        audio.save_model(tmp_path / "m.kowt", tmp_path / "m.json", model,
                         "spectrogram", ds.images.shape[1:])
        fresh = build_model(ds.images.shape[1:])
        audio.load_model_weights(tmp_path / "m.kowt", fresh)
        x = ds.images[:2]
        np.testing.assert_array_equal(fresh.forward(x), model.forward(x))
        import json
        header = json.loads((tmp_path / "m.json").read_text())
        assert header["representation"] == "spectrogram"
        assert header["class_order"] == ["grass", "gravel", "asphalt"]

    def test_predictions_csv(self, tmp_path):
        preds = [audio.TerrainPrediction(
            terrain=1, probabilities=np.array([0.1, 0.8, 0.1]),
            timestamp=0.25)]
        audio.predictions_csv(tmp_path / "p.csv", preds)
        lines = (tmp_path / "p.csv").read_text().splitlines()
        assert lines[0] == "timestamp,class,p_grass,p_gravel,p_asphalt"
        assert lines[1] == "0.250000,gravel,0.100000,0.800000,0.100000"

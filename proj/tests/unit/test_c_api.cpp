#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "minibert/minibert.h"

namespace fs = std::filesystem;

namespace {

const std::string kData = MINIBERT_DATA_DIR;

fs::path TempDir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("minibert_capi_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string Slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

mb_model_config Tiny(size_t vocab_size) {
  mb_model_config c;
  mb_model_config_default(&c);
  c.vocab_size = vocab_size;
  c.hidden_dim = 16;
  c.num_heads = 2;
  c.ff_dim = 32;
  c.max_len = 32;
  c.dropout = 0.0f;
  return c;
}

}  // namespace

TEST_CASE("status names and last error") {
  CHECK(std::string(mb_status_name(MB_OK)) == "ok");
  CHECK(std::string(mb_status_name(MB_ERR_MISMATCH)) == "mismatch");
  CHECK(std::string(mb_version()).size() > 0);
  mb_vocab* v = nullptr;
  CHECK(mb_vocab_load("/nonexistent/vocab.txt", &v) == MB_ERR_IO);
  CHECK(v == nullptr);
  CHECK(std::string(mb_last_error()).find("/nonexistent/vocab.txt") != std::string::npos);
}

TEST_CASE("null arguments are rejected, free accepts null") {
  CHECK(mb_vocab_load(nullptr, nullptr) == MB_ERR_INVALID_ARGUMENT);
  CHECK(mb_model_save(nullptr, "x") == MB_ERR_INVALID_ARGUMENT);
  double out = 0;
  CHECK(mb_auc(nullptr, nullptr, 0, &out) == MB_ERR_INVALID_ARGUMENT);
  mb_vocab_free(nullptr);
  mb_model_free(nullptr);
  mb_dataset_free(nullptr);
  mb_features_free(nullptr);
  mb_logreg_free(nullptr);
  CHECK(mb_vocab_size(nullptr) == 0);
}

TEST_CASE("metrics through the C API") {
  const double s[] = {0.1, 0.4, 0.35, 0.8};
  const int y[] = {0, 0, 1, 1};
  double auc = 0;
  REQUIRE(mb_auc(s, y, 4, &auc) == MB_OK);
  CHECK(auc == doctest::Approx(0.75));
  const int one_class[] = {1, 1, 1, 1};
  CHECK(mb_auc(s, one_class, 4, &auc) == MB_ERR_UNDEFINED_METRIC);

  const fs::path dir = TempDir("metrics");
  double t = 0, f1 = 0;
  const double s2[] = {0.30, 0.35, 0.40};
  const int y2[] = {0, 1, 1};
  REQUIRE(mb_threshold_sweep(s2, y2, 3, &t, &f1, (dir / "r.tsv").c_str()) == MB_OK);
  CHECK(t == doctest::Approx(0.31));
  CHECK(f1 == 1.0);
  CHECK(Slurp(dir / "r.tsv").rfind("threshold\tf1\n", 0) == 0);
}

TEST_CASE("vocab, model and checkpoint round trip") {
  const fs::path dir = TempDir("model");
  mb_vocab* v = nullptr;
  REQUIRE(mb_vocab_build((kData + "/toy_corpus.txt").c_str(), 8000, &v) == MB_OK);
  const size_t n = mb_vocab_size(v);
  CHECK(n > 5);
  REQUIRE(mb_vocab_save(v, (dir / "vocab.txt").c_str()) == MB_OK);
  mb_vocab* v2 = nullptr;
  REQUIRE(mb_vocab_load((dir / "vocab.txt").c_str(), &v2) == MB_OK);
  CHECK(mb_vocab_size(v2) == n);

  const mb_model_config cfg = Tiny(n);
  mb_model* m = nullptr;
  REQUIRE(mb_model_create(&cfg, 3, &m) == MB_OK);
  REQUIRE(mb_model_save(m, (dir / "m.bin").c_str()) == MB_OK);
  mb_model* back = nullptr;
  REQUIRE(mb_model_load((dir / "m.bin").c_str(), &cfg, &back) == MB_OK);
  mb_model_config got;
  REQUIRE(mb_model_get_config(back, &got) == MB_OK);
  CHECK(got.hidden_dim == 16);
  CHECK(got.vocab_size == n);
  REQUIRE(mb_model_save(back, (dir / "m2.bin").c_str()) == MB_OK);
  CHECK(Slurp(dir / "m.bin") == Slurp(dir / "m2.bin"));

  mb_model_config wrong = cfg;
  wrong.hidden_dim = 32;
  mb_model* bad = nullptr;
  CHECK(mb_model_load((dir / "m.bin").c_str(), &wrong, &bad) == MB_ERR_MISMATCH);
  const std::string msg = mb_last_error();
  CHECK(msg.find("hidden_dim=16") != std::string::npos);
  CHECK(msg.find("hidden_dim=32") != std::string::npos);

  mb_model_config invalid = cfg;
  invalid.num_heads = 3;
  CHECK(mb_model_create(&invalid, 1, &bad) == MB_ERR_INVALID_ARGUMENT);

  mb_model_free(back);
  mb_model_free(m);
  mb_vocab_free(v2);
  mb_vocab_free(v);
}

TEST_CASE("pretrain, finetune and predict") {
  const fs::path dir = TempDir("train");
  mb_set_deterministic(1);
  mb_vocab* v = nullptr;
  REQUIRE(mb_vocab_build((kData + "/toy_corpus.txt").c_str(), 8000, &v) == MB_OK);
  const mb_model_config cfg = Tiny(mb_vocab_size(v));
  mb_model* m = nullptr;
  REQUIRE(mb_model_create(&cfg, 42, &m) == MB_OK);

  mb_pretrain_options po;
  mb_pretrain_options_default(&po);
  CHECK(std::string(po.mask_policy) == "token");
  po.steps = 4;
  po.batch_size = 4;
  po.max_len = 32;
  po.checkpoint_every = 2;
  const std::string prefix = (dir / "ck_").string();
  po.checkpoint_prefix = prefix.c_str();
  size_t calls = 0;
  auto on_step = [](size_t, double total, double, double, double, void* user) {
    CHECK(std::isfinite(total));
    ++*static_cast<size_t*>(user);
  };
  REQUIRE(mb_pretrain(m, (kData + "/toy_corpus.txt").c_str(), v, &po, (dir / "loss.tsv").c_str(), on_step,
                      &calls) == MB_OK);
  CHECK(calls == 4);
  CHECK(fs::exists(dir / "ck_2.bin"));
  CHECK(fs::exists(dir / "ck_4.bin"));
  CHECK(Slurp(dir / "loss.tsv").rfind("step\ttotal\tmlm\tnsp\trtd\n", 0) == 0);

  po.mask_policy = "bogus";
  CHECK(mb_pretrain(m, (kData + "/toy_corpus.txt").c_str(), v, &po, nullptr, nullptr, nullptr) ==
        MB_ERR_INVALID_ARGUMENT);

  mb_dataset* all = nullptr;
  REQUIRE(mb_dataset_load_tsv((kData + "/sentiment_separable.tsv").c_str(), &all) == MB_OK);
  CHECK(mb_dataset_size(all) == 200);
  mb_dataset *train = nullptr, *test = nullptr;
  REQUIRE(mb_dataset_split(all, 0.75, 42, &train, &test) == MB_OK);
  CHECK(mb_dataset_size(train) == 150);
  CHECK(mb_dataset_size(test) == 50);
  std::vector<int> labels(49);
  CHECK(mb_dataset_labels(test, labels.data(), labels.size()) == MB_ERR_DIMENSION);

  mb_finetune_options fo;
  mb_finetune_options_default(&fo);
  CHECK(fo.lr == 1e-6);
  CHECK(fo.patience == 10);
  CHECK(fo.lr_factor == 0.2);
  fo.lr = 1e-3;
  fo.max_epochs = 2;
  int epochs = 0;
  auto on_epoch = [](const mb_epoch_record* r, void* user) {
    CHECK(r->epoch == ++*static_cast<int*>(user));
  };
  REQUIRE(mb_finetune(m, v, train, test, &fo, (dir / "epochs.tsv").c_str(), on_epoch, &epochs) == MB_OK);
  CHECK(epochs == 2);
  CHECK(Slurp(dir / "epochs.tsv").rfind("epoch\ttrain_loss\t", 0) == 0);

  std::vector<double> scores(mb_dataset_size(test));
  REQUIRE(mb_predict_sentiment(m, v, test, 32, scores.data(), scores.size()) == MB_OK);
  for (double s : scores) {
    CHECK(s > 0.0);
    CHECK(s < 1.0);
  }
  CHECK(mb_predict_sentiment(m, v, test, 32, scores.data(), scores.size() - 1) == MB_ERR_DIMENSION);

  mb_dataset_free(train);
  mb_dataset_free(test);
  mb_dataset_free(all);
  mb_model_free(m);
  mb_vocab_free(v);
  mb_set_deterministic(0);
}

TEST_CASE("features, logistic regression and pipeline") {
  const fs::path dir = TempDir("pipeline");
  mb_vocab* v = nullptr;
  REQUIRE(mb_vocab_build((kData + "/toy_corpus.txt").c_str(), 8000, &v) == MB_OK);
  const mb_model_config cfg = Tiny(mb_vocab_size(v));
  mb_model* m = nullptr;
  REQUIRE(mb_model_create(&cfg, 1, &m) == MB_OK);
  mb_dataset* ds = nullptr;
  REQUIRE(mb_dataset_load_tsv((kData + "/sentiment_patterns.tsv").c_str(), &ds) == MB_OK);

  mb_features* f = nullptr;
  REQUIRE(mb_features_extract(m, v, ds, 32, MB_FEATURES_CLS, &f) == MB_OK);
  CHECK(mb_features_rows(f) == 400);
  CHECK(mb_features_cols(f) == 16);
  CHECK(mb_features_extract(m, v, ds, 32, 7, &f) == MB_ERR_INVALID_ARGUMENT);
  CHECK(mb_features_extract(nullptr, v, ds, 32, MB_FEATURES_CLS, &f) == MB_ERR_INVALID_ARGUMENT);
  mb_features_free(f);
  REQUIRE(mb_features_extract(nullptr, v, ds, 32, MB_FEATURES_BAG_OF_IDS, &f) == MB_OK);
  CHECK(mb_features_cols(f) == mb_vocab_size(v));
  REQUIRE(mb_features_save(f, (dir / "f.txt").c_str(), (dir / "l.txt").c_str()) == MB_OK);
  mb_features* g = nullptr;
  REQUIRE(mb_features_load((dir / "f.txt").c_str(), (dir / "l.txt").c_str(), &g) == MB_OK);
  CHECK(mb_features_rows(g) == 400);

  mb_logreg_options lo;
  mb_logreg_options_default(&lo);
  mb_logreg* lr = nullptr;
  REQUIRE(mb_logreg_train(g, &lo, (dir / "loss.tsv").c_str(), &lr) == MB_OK);
  CHECK(Slurp(dir / "loss.tsv").rfind("step\tobjective\n", 0) == 0);
  REQUIRE(mb_logreg_save(lr, (dir / "lr.txt").c_str()) == MB_OK);
  mb_logreg* lr2 = nullptr;
  REQUIRE(mb_logreg_load((dir / "lr.txt").c_str(), &lr2) == MB_OK);
  std::vector<double> a(400), b(400);
  REQUIRE(mb_logreg_predict(lr, g, a.data(), a.size()) == MB_OK);
  REQUIRE(mb_logreg_predict(lr2, g, b.data(), b.size()) == MB_OK);
  CHECK(a == b);

  mb_dataset *train = nullptr, *test = nullptr;
  REQUIRE(mb_dataset_split(ds, 0.75, 42, &train, &test) == MB_OK);
  mb_pipeline_report r;
  REQUIRE(mb_evaluate_pipeline(train, test, m, v, 32, &lo, MB_FEATURES_BAG_OF_IDS, (dir / "rep.txt").c_str(),
                               &r) == MB_OK);
  CHECK(r.n_train == 300);
  CHECK(r.n_test == 100);
  CHECK(r.accuracy > r.majority_baseline);
  CHECK(Slurp(dir / "rep.txt").find("accuracy=") != std::string::npos);

  mb_logreg_free(lr2);
  mb_logreg_free(lr);
  mb_features_free(g);
  mb_features_free(f);
  mb_dataset_free(train);
  mb_dataset_free(test);
  mb_dataset_free(ds);
  mb_model_free(m);
  mb_vocab_free(v);
}

TEST_CASE("log callback receives library warnings") {
  struct Sink {
    int warnings = 0;
  } sink;
  mb_set_log_callback(
      [](int level, const char*, void* user) {
        if (level == MB_LOG_WARNING) ++static_cast<Sink*>(user)->warnings;
      },
      &sink);
  // A one-class training set makes the train AUC undefined, which is logged.
  const fs::path dir = TempDir("log");
  {
    std::ofstream out(dir / "one.tsv");
    out << "sentence\tlabel\nthe movie was good\t1\nthe movie was great\t1\n";
  }
  mb_vocab* v = nullptr;
  REQUIRE(mb_vocab_build((kData + "/toy_corpus.txt").c_str(), 8000, &v) == MB_OK);
  const mb_model_config cfg = Tiny(mb_vocab_size(v));
  mb_model* m = nullptr;
  REQUIRE(mb_model_create(&cfg, 1, &m) == MB_OK);
  mb_dataset* one = nullptr;
  REQUIRE(mb_dataset_load_tsv((dir / "one.tsv").c_str(), &one) == MB_OK);
  mb_dataset* test = nullptr;
  REQUIRE(mb_dataset_load_tsv((kData + "/sentiment_separable.tsv").c_str(), &test) == MB_OK);
  mb_finetune_options fo;
  mb_finetune_options_default(&fo);
  fo.max_epochs = 1;
  CHECK(mb_finetune(m, v, one, test, &fo, nullptr, nullptr, nullptr) == MB_OK);
  CHECK(sink.warnings > 0);
  mb_set_log_callback(nullptr, nullptr);
  mb_dataset_free(test);
  mb_dataset_free(one);
  mb_model_free(m);
  mb_vocab_free(v);
}

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "corelm/cli.hpp"
#include "corelm/corpus.hpp"
#include "corelm/entity.hpp"
#include "corelm/error.hpp"
#include "corelm/eval.hpp"
#include "corelm/tokenizer.hpp"
#include "corelm/train.hpp"

namespace py = pybind11;
using namespace corelm;

namespace {

py::array_t<double> to_numpy(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<double> out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

Tensor from_numpy(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
  if (a.ndim() != 2) throw ShapeError("expected a 2-d array");
  const auto rows = static_cast<std::size_t>(a.shape(0)), cols = static_cast<std::size_t>(a.shape(1));
  return Tensor::matrix(rows, cols, std::vector<double>(a.data(), a.data() + a.size()));
}

py::dict report_dict(const EvalReport& r) {
  py::dict out;
  out["task"] = r.task;
  py::dict aggregates;
  for (const auto& [k, v] : r.aggregates) aggregates[py::str(k)] = v;
  out["aggregates"] = aggregates;
  py::list examples;
  for (const auto& e : r.examples) {
    examples.append(py::dict(py::arg("id") = e.id, py::arg("category") = e.category, py::arg("score") = e.score,
                             py::arg("count") = e.count));
  }
  out["examples"] = examples;
  return out;
}

py::dict ttest_dict(const TTestResult& t) {
  return py::dict(py::arg("t") = t.t, py::arg("p") = t.p, py::arg("n") = t.n,
                  py::arg("mean_difference") = t.mean_difference,
                  py::arg("degenerate_variance") = t.degenerate_variance);
}

py::list steps_list(const std::vector<StepRecord>& log) {
  py::list out;
  for (const auto& r : log) out.append(py::make_tuple(r.step, r.loss, r.lr));
  return out;
}

template <typename Fn>
py::tuple with_log(Fn fn) {
  std::ostringstream log;
  const std::filesystem::path dir = fn(log);
  return py::make_tuple(dir.string(), log.str());
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Entity-aware decoder language model: models, data pipeline, training and evaluation";

  auto base_error = py::register_exception<Error>(m, "CoreLMError", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", base_error);
  py::register_exception<FormatError>(m, "FormatError", base_error);
  py::register_exception<IoError>(m, "IoError", base_error);
  py::register_exception<CheckpointError>(m, "CheckpointError", base_error);
  py::register_exception<AlignmentError>(m, "AlignmentError", base_error);
  py::register_exception<VocabularyError>(m, "VocabularyError", base_error);
  py::register_exception<ShapeError>(m, "ShapeError", base_error);
  py::register_exception<ValueError>(m, "ValueError", base_error);

  py::enum_<GateMode>(m, "GateMode").value("SCALAR", GateMode::kScalar).value("ELEMENTWISE", GateMode::kElementwise);

  py::class_<ModelConfig>(m, "ModelConfig")
      .def(py::init<>())
      .def_readwrite("vocab_size", &ModelConfig::vocab_size)
      .def_readwrite("context_window", &ModelConfig::context_window)
      .def_readwrite("d_model", &ModelConfig::d_model)
      .def_readwrite("n_layers", &ModelConfig::n_layers)
      .def_readwrite("n_heads", &ModelConfig::n_heads)
      .def_readwrite("d_ff", &ModelConfig::d_ff)
      .def_readwrite("entity_heads", &ModelConfig::entity_heads)
      .def_readwrite("delta", &ModelConfig::delta)
      .def_readwrite("layer_norm_eps", &ModelConfig::layer_norm_eps)
      .def_readwrite("init_std", &ModelConfig::init_std)
      .def_readwrite("gate_mode", &ModelConfig::gate_mode)
      .def_readwrite("bos_token", &ModelConfig::bos_token)
      .def("validate", &ModelConfig::validate)
      .def_static("gpt2_small", &ModelConfig::gpt2_small);

  py::class_<GroupTrainability>(m, "GroupTrainability")
      .def(py::init<>())
      .def_readwrite("token_embedding", &GroupTrainability::token_embedding)
      .def_readwrite("position_embedding", &GroupTrainability::position_embedding)
      .def_readwrite("decoder_blocks", &GroupTrainability::decoder_blocks)
      .def_readwrite("entity_gating", &GroupTrainability::entity_gating);

  py::class_<TrainConfig>(m, "TrainConfig")
      .def(py::init<>())
      .def_readwrite("epochs", &TrainConfig::epochs)
      .def_readwrite("batch_size", &TrainConfig::batch_size)
      .def_readwrite("lr_start", &TrainConfig::lr_start)
      .def_readwrite("warmup_steps", &TrainConfig::warmup_steps)
      .def_readwrite("seed", &TrainConfig::seed)
      .def_readwrite("momentum", &TrainConfig::momentum)
      .def_readwrite("trainable", &TrainConfig::trainable)
      .def_readwrite("adam_beta1", &TrainConfig::adam_beta1)
      .def_readwrite("adam_beta2", &TrainConfig::adam_beta2)
      .def_readwrite("adam_eps", &TrainConfig::adam_eps)
      .def("validate", &TrainConfig::validate);

  py::class_<EntityStore>(m, "EntityStore")
      .def(py::init<std::size_t, double, std::string>(), py::arg("dim"), py::arg("momentum") = 0.5,
           py::arg("scope") = "default")
      .def_property_readonly("dim", &EntityStore::dim)
      .def_property("momentum", &EntityStore::momentum, &EntityStore::set_momentum)
      .def_property("scope", &EntityStore::scope, &EntityStore::set_scope)
      .def("lookup",
           [](const EntityStore& s, EntityId id) {
             auto v = s.lookup(id);
             return std::vector<double>(v.begin(), v.end());
           })
      .def("set", [](EntityStore& s, EntityId id, const std::vector<double>& v) { s.set(id, v); })
      .def("__contains__", &EntityStore::contains)
      .def("__len__", &EntityStore::size)
      .def("ids",
           [](const EntityStore& s) {
             std::vector<EntityId> ids;
             for (const auto& [id, v] : s.entries()) ids.push_back(id);
             return ids;
           })
      .def("reset", &EntityStore::reset);
  m.def("save_store", &save_store, py::arg("store"), py::arg("path"));
  m.def("load_store", &load_store, py::arg("path"));

  py::class_<AnnotatedDocument>(m, "AnnotatedDocument")
      .def(py::init<>())
      .def_readwrite("doc_id", &AnnotatedDocument::doc_id)
      .def_readwrite("source_type", &AnnotatedDocument::source_type)
      .def_readwrite("words", &AnnotatedDocument::words)
      .def_readwrite("entity_layers", &AnnotatedDocument::entity_layers)
      .def("__eq__", [](const AnnotatedDocument& a, const AnnotatedDocument& b) { return a == b; });
  m.def("parse_documents", &parse_documents, py::arg("text"));
  m.def("serialize_documents", [](const std::vector<AnnotatedDocument>& d) { return serialize_documents(d); });
  m.def("expand_layers", &expand_layers, py::arg("document"));

  py::class_<BpeTokenizer>(m, "BpeTokenizer")
      .def(py::init<>())
      .def_static("train", [](const std::vector<std::string>& corpus, std::size_t vocab, std::size_t min_count) {
        return BpeTokenizer::train(corpus, vocab, min_count);
      }, py::arg("corpus"), py::arg("vocab_size"), py::arg("min_pair_count") = 2)
      .def_property_readonly("vocab_size", &BpeTokenizer::vocab_size)
      .def("encode", &BpeTokenizer::encode, py::arg("text"))
      .def("decode", [](const BpeTokenizer& t, const std::vector<TokenId>& ids) { return py::bytes(t.decode(ids)); })
      .def("to_text", &BpeTokenizer::to_text)
      .def_static("from_text", &BpeTokenizer::from_text)
      .def("save", &BpeTokenizer::save)
      .def_static("load", &BpeTokenizer::load);

  py::class_<TokenizedInstance>(m, "TokenizedInstance")
      .def(py::init<>())
      .def(py::init([](std::string id, std::vector<TokenId> tokens, std::vector<EntityId> entities) {
             TokenizedInstance t;
             t.id = std::move(id);
             if (entities.empty()) entities.assign(tokens.size(), 0);
             for (std::size_t i = 0; i < tokens.size(); ++i) t.word_boundaries.push_back({i, i + 1});
             t.token_ids = std::move(tokens);
             t.entity_ids = std::move(entities);
             return t;
           }),
           py::arg("id"), py::arg("token_ids"), py::arg("entity_ids") = std::vector<EntityId>{})
      .def_readwrite("id", &TokenizedInstance::id)
      .def_readwrite("token_ids", &TokenizedInstance::token_ids)
      .def_readwrite("entity_ids", &TokenizedInstance::entity_ids);
  m.def("tokenize_align", &tokenize_align, py::arg("document"), py::arg("tokenizer"));

  py::class_<LanguageModel>(m, "LanguageModel")
      .def_property_readonly("vocab_size", &LanguageModel::vocab_size)
      .def_property_readonly("context_window", &LanguageModel::context_window)
      .def(
          "next_token_log_probs",
          [](const LanguageModel& model, const std::vector<TokenId>& tokens, const std::vector<EntityId>& ids,
             const EntityStore* store) { return to_numpy(model.next_token_log_probs(tokens, ids, store)); },
          py::arg("tokens"), py::arg("entity_ids") = std::vector<EntityId>{}, py::arg("store") = nullptr)
      .def(
          "hidden", [](const LanguageModel& model, const std::vector<TokenId>& tokens) {
            return to_numpy(model.entity_hidden(tokens));
          },
          py::arg("tokens"));

  py::class_<DecoderModel, LanguageModel>(m, "DecoderModel")
      .def(py::init<const ModelConfig&, std::uint64_t>(), py::arg("config"), py::arg("seed"))
      .def_property_readonly("config", &DecoderModel::config)
      .def("clone", &DecoderModel::clone)
      .def("parameter_count", [](const DecoderModel& m) {
        std::size_t n = 0;
        for (const auto& p : m.parameters()) n += p.tensor.numel();
        return n;
      });

  py::class_<CoreLM, LanguageModel>(m, "CoreLM")
      .def(py::init<const ModelConfig&, std::uint64_t>(), py::arg("config"), py::arg("seed"))
      .def(py::init([](const DecoderModel& base, std::uint64_t gating_seed) {
             return CoreLM(base.clone(), make_entity_gating(base.config(), gating_seed));
           }),
           py::arg("base"), py::arg("gating_seed"))
      .def_property_readonly("config", &CoreLM::config)
      .def_property(
          "delta", [](const CoreLM& m) { return m.gating().delta; },
          [](CoreLM& m, double d) {
            if (!(d >= 0.0 && d <= 1.0)) throw ValueError("gate flow rate delta must lie in [0, 1]");
            m.gating().delta = d;
          })
      .def("clone", &CoreLM::clone)
      .def("base", [](const CoreLM& m) { return m.base().clone(); })
      .def("gating_parameter_count", [](const CoreLM& m) { return count_parameters(m.gating()); });

  m.def("entity_gating_param_count", &entity_gating_param_count, py::arg("d_model"), py::arg("d_ff"));
  m.def(
      "update_entity_representations",
      [](EntityStore& store, const std::vector<EntityId>& ids, const py::array_t<double>& hidden) {
        update_entity_representations(store, ids, from_numpy(hidden));
      },
      py::arg("store"), py::arg("entity_ids"), py::arg("hidden"));

  m.def(
      "pretrain_base",
      [](DecoderModel& model, const std::vector<TokenizedInstance>& docs, const TrainConfig& config) {
        std::vector<StepRecord> log;
        {
          py::gil_scoped_release release;
          log = pretrain_base(model, docs, config, nullptr);
        }
        return steps_list(log);
      },
      py::arg("model"), py::arg("docs"), py::arg("config"));
  m.def(
      "fine_tune",
      [](CoreLM& model, EntityStore& store, const std::vector<TokenizedInstance>& docs, const TrainConfig& config) {
        std::vector<StepRecord> log;
        {
          py::gil_scoped_release release;
          log = fine_tune(model, store, docs, config, nullptr);
        }
        return steps_list(log);
      },
      py::arg("model"), py::arg("store"), py::arg("docs"), py::arg("config"));
  m.def("learning_rate", &learning_rate, py::arg("step"), py::arg("total_steps"), py::arg("config"));

  m.def("save_decoder", &save_decoder, py::arg("path"), py::arg("model"));
  m.def("load_decoder", &load_decoder, py::arg("path"));
  m.def("save_corelm", &save_corelm, py::arg("path"), py::arg("model"));
  m.def("load_corelm", &load_corelm, py::arg("path"));

  m.def(
      "eval_perplexity",
      [](const LanguageModel& model, const EntityStore& store, const std::vector<TokenizedInstance>& docs,
         const std::string& store_mode, bool use_entities, std::size_t stride) {
        PerplexityOptions o;
        o.store_mode = parse_store_mode(store_mode);
        o.use_entities = use_entities;
        o.stride = stride;
        return report_dict(eval_perplexity(model, store, docs, o));
      },
      py::arg("model"), py::arg("store"), py::arg("docs"), py::arg("store_mode") = "frozen",
      py::arg("use_entities") = true, py::arg("stride") = 0);
  m.def(
      "paired_t_test",
      [](const std::vector<double>& a, const std::vector<double>& b) {
        if (a.size() != b.size()) throw ValueError("paired samples must have equal length");
        EvalReport ra, rb;
        ra.task = rb.task = "paired";
        for (std::size_t i = 0; i < a.size(); ++i) {
          ra.examples.push_back({std::to_string(i), "", a[i], 1});
          rb.examples.push_back({std::to_string(i), "", b[i], 1});
        }
        return ttest_dict(paired_t_test(ra, rb));
      },
      py::arg("a"), py::arg("b"));
  m.def("t_two_sided_p", &t_two_sided_p, py::arg("t"), py::arg("dof"));
  m.def("load_report", [](const std::filesystem::path& p) { return report_dict(load_report(p)); }, py::arg("path"));

  py::class_<RunConfig>(m, "RunConfig")
      .def_static("parse", &RunConfig::parse, py::arg("text"))
      .def_static("load", &RunConfig::load, py::arg("path"))
      .def("set", &RunConfig::set, py::arg("assignment"))
      .def("get", &RunConfig::get, py::arg("key"))
      .def("resolved", &RunConfig::resolved);
  m.def("prepare_data", [](const RunConfig& c) { return with_log([&](std::ostream& l) { return cmd_prepare_data(c, l); }); });
  m.def("pretrain", [](const RunConfig& c) { return with_log([&](std::ostream& l) { return cmd_pretrain(c, l); }); });
  m.def("finetune", [](const RunConfig& c) { return with_log([&](std::ostream& l) { return cmd_finetune(c, l); }); });
  m.def(
      "evaluate",
      [](const RunConfig& c, const std::string& task) {
        return with_log([&](std::ostream& l) { return cmd_eval(c, task, l); });
      },
      py::arg("config"), py::arg("task"));
  m.def("compare", [](const std::filesystem::path& a, const std::filesystem::path& b) {
    std::ostringstream out;
    return ttest_dict(cmd_compare(a, b, out));
  });
}
